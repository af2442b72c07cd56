//! A small fully-connected velocity-field approximator `v(x, t)` with
//! hand-written reverse-mode gradients and a bit-exact checkpoint format.
//!
//! Time enters through sinusoidal features `sin/cos(2^k * pi * t)` for
//! `k = 0..F-1` concatenated to the state, so the input width is `d + 2F`.
//! Hidden layers use a smooth GELU-style nonlinearity; the output layer is
//! linear.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::{PathSample, StatePoint};
use crate::seeding::{self, tag};

/// Default number of sinusoidal time-feature pairs.
pub const DEFAULT_TIME_FEATURES: usize = 4;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// y = W * x
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            y[r] = acc;
        }
    }

    /// y = W^T * g
    fn matvec_t(&self, g: &[f64], y: &mut [f64]) {
        debug_assert_eq!(g.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        y.fill(0.0);
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let gr = g[r];
            for (yi, w) in y.iter_mut().zip(row) {
                *yi += gr * w;
            }
        }
    }

    /// W += g (outer) a
    fn add_outer(&mut self, g: &[f64], a: &[f64]) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let gr = g[r];
            for (w, ai) in row.iter_mut().zip(a) {
                *w += gr * ai;
            }
        }
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// All parameters of the approximator plus provenance metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub d: usize,
    pub time_features: usize,
    /// Hidden layer widths, input and output widths excluded.
    pub widths: Vec<usize>,
    pub layers: Vec<Layer>,
    pub init_seed: u64,
    /// Number of completed training epochs.
    pub epoch: u64,
}

/// Gradients with the same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<Layer>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| Layer {
                weight: Matrix::zeros(l.weight.rows, l.weight.cols),
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        Self { layers }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers.iter_mut() {
            l.weight.scale(s);
            for b in l.bias.iter_mut() {
                *b *= s;
            }
        }
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for l in &self.layers {
            for w in &l.weight.data {
                acc += w * w;
            }
            for b in &l.bias {
                acc += b * b;
            }
        }
        acc.sqrt()
    }

    /// Visit every entry in a fixed order (layer, weights row-major, bias).
    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            for &w in &l.weight.data {
                f(w);
            }
            for &b in &l.bias {
                f(b);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }
}

impl ModelParams {
    pub fn input_width(&self) -> usize {
        self.d + 2 * self.time_features
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data.len() + l.bias.len())
            .sum()
    }

    fn layer_sizes(d: usize, time_features: usize, widths: &[usize]) -> Vec<(usize, usize)> {
        let mut dims = vec![d + 2 * time_features];
        dims.extend_from_slice(widths);
        dims.push(d);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

/// Deterministically initialize parameters: weights drawn with fan-in-scaled
/// variance, biases zero.
pub fn init_params(seed: u64, widths: &[usize], d: usize) -> Result<ModelParams> {
    init_params_with(seed, widths, d, DEFAULT_TIME_FEATURES)
}

pub fn init_params_with(
    seed: u64,
    widths: &[usize],
    d: usize,
    time_features: usize,
) -> Result<ModelParams> {
    if widths.is_empty() {
        return Err(Error::Config("model widths must be nonempty".into()));
    }
    if d == 0 {
        return Err(Error::Config("state dimension must be positive".into()));
    }
    if widths.contains(&0) {
        return Err(Error::Config("layer widths must be positive".into()));
    }
    let mut rng = seeding::rng_for(seed, tag::MODEL_INIT);
    let mut layers = Vec::new();
    for (rows, cols) in ModelParams::layer_sizes(d, time_features, widths) {
        let std = (1.0 / cols as f64).sqrt();
        let mut weight = Matrix::zeros(rows, cols);
        for w in weight.data.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        layers.push(Layer { weight, bias: vec![0.0; rows] });
    }
    Ok(ModelParams {
        d,
        time_features,
        widths: widths.to_vec(),
        layers,
        init_seed: seed,
        epoch: 0,
    })
}

fn time_features(t: f64, pairs: usize, out: &mut Vec<f64>) {
    for k in 0..pairs {
        let freq = (1u64 << k) as f64 * std::f64::consts::PI;
        out.push((freq * t).sin());
        out.push((freq * t).cos());
    }
}

fn build_input(params: &ModelParams, x: &StatePoint, t: f64) -> Result<Vec<f64>> {
    if x.dim() != params.d {
        return Err(Error::Shape(format!(
            "input dimension {} but model expects {}",
            x.dim(),
            params.d
        )));
    }
    if !x.is_finite() || !t.is_finite() {
        return Err(Error::Domain("non-finite input to forward".into()));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let mut input = Vec::with_capacity(params.input_width());
    input.extend_from_slice(&x.coords);
    time_features(t, params.time_features, &mut input);
    Ok(input)
}

struct ForwardCache {
    /// Activations entering each layer; `acts[0]` is the network input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Vec<f64>>,
}

fn forward_cached(params: &ModelParams, x: &StatePoint, t: f64) -> Result<(Vec<f64>, ForwardCache)> {
    let input = build_input(params, x, t)?;
    let n_layers = params.layers.len();
    let mut acts = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = input;
    for (li, layer) in params.layers.iter().enumerate() {
        let mut z = vec![0.0; layer.weight.rows];
        layer.weight.matvec(&h, &mut z);
        for (zi, bi) in z.iter_mut().zip(&layer.bias) {
            *zi += bi;
        }
        acts.push(h);
        let last = li + 1 == n_layers;
        let out = if last { z.clone() } else { z.iter().map(|&v| gelu(v)).collect() };
        pre.push(z);
        h = out;
    }
    Ok((h, ForwardCache { acts, pre }))
}

/// Evaluate the velocity field at `(x, t)`.
pub fn forward(params: &ModelParams, x: &StatePoint, t: f64) -> Result<StatePoint> {
    let (out, _) = forward_cached(params, x, t)?;
    Ok(StatePoint::new(out))
}

/// Evaluate the velocity field on a batch; equals per-sample evaluation.
pub fn forward_batch(params: &ModelParams, xs: &[StatePoint], t: f64) -> Result<Vec<StatePoint>> {
    xs.iter().map(|x| forward(params, x, t)).collect()
}

/// Per-sample squared-error and its gradient (not yet averaged).
fn sample_loss_and_grad(params: &ModelParams, sample: &PathSample) -> Result<(f64, GradientSet)> {
    if sample.v_target.dim() != params.d {
        return Err(Error::Shape("target dimension mismatch".into()));
    }
    let (out, cache) = forward_cached(params, &sample.x_t, sample.t)?;
    let mut grad = GradientSet::zeros_like(params);
    let n_layers = params.layers.len();

    let mut loss = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(&sample.v_target.coords)
        .map(|(o, tgt)| {
            let e = o - tgt;
            loss += e * e;
            2.0 * e
        })
        .collect();

    for li in (0..n_layers).rev() {
        // delta currently holds dL/dz for the output layer, dL/da for the rest.
        if li + 1 != n_layers {
            for (d, z) in delta.iter_mut().zip(&cache.pre[li]) {
                *d *= gelu_prime(*z);
            }
        }
        grad.layers[li].weight.add_outer(&delta, &cache.acts[li]);
        for (b, d) in grad.layers[li].bias.iter_mut().zip(&delta) {
            *b += d;
        }
        if li > 0 {
            let mut prev = vec![0.0; params.layers[li].weight.cols];
            params.layers[li].weight.matvec_t(&delta, &mut prev);
            delta = prev;
        }
    }
    Ok((loss, grad))
}

/// Pairwise (binary-counter) reducer so that summation order is balanced;
/// duplicating every batch element reproduces exactly twice the sums.
struct PairwiseAccum {
    stack: Vec<(u32, f64, GradientSet)>,
}

impl PairwiseAccum {
    fn new() -> Self {
        Self { stack: Vec::new() }
    }

    fn push(&mut self, loss: f64, grad: GradientSet) {
        let mut level = 0u32;
        let mut loss = loss;
        let mut grad = grad;
        while matches!(self.stack.last(), Some((l, _, _)) if *l == level) {
            let (_, l2, g2) = self.stack.pop().unwrap();
            loss += l2;
            let mut merged = g2;
            merged.add_assign(&grad);
            grad = merged;
            level += 1;
        }
        self.stack.push((level, loss, grad));
    }

    fn finish(mut self) -> Option<(f64, GradientSet)> {
        let (_, mut loss, mut grad) = self.stack.pop()?;
        while let Some((_, l2, g2)) = self.stack.pop() {
            loss += l2;
            let mut merged = g2;
            merged.add_assign(&grad);
            grad = merged;
        }
        Some((loss, grad))
    }
}

/// Mean squared velocity-matching loss over a batch and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[PathSample]) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let mut acc = PairwiseAccum::new();
    for sample in batch {
        let (l, g) = sample_loss_and_grad(params, sample)?;
        acc.push(l, g);
    }
    let (loss_sum, mut grad) = acc.finish().expect("nonempty batch");
    let inv = 1.0 / batch.len() as f64;
    grad.scale(inv);
    Ok((loss_sum * inv, grad))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    d: usize,
    time_features: usize,
    widths: Vec<usize>,
    init_seed: u64,
    epoch: u64,
    param_count: usize,
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CFLOWCK1";

/// Write parameters to a versioned binary file: magic, JSON header,
/// little-endian f64 payload. Round-trip is bitwise exact.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        format_version: 1,
        d: params.d,
        time_features: params.time_features,
        widths: params.widths.clone(),
        init_seed: params.init_seed,
        epoch: params.epoch,
        param_count: params.param_count(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for layer in &params.layers {
        for v in &layer.weight.data {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &layer.bias {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`], validating magic,
/// version, and shape consistency.
pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(
        File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated header length: {e}")))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.format_version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.d == 0 || header.widths.is_empty() {
        return Err(Error::Checkpoint("degenerate shape in header".into()));
    }

    let sizes = ModelParams::layer_sizes(header.d, header.time_features, &header.widths);
    let expected: usize = sizes.iter().map(|(r_, c)| r_ * c + r_).sum();
    if expected != header.param_count {
        return Err(Error::Checkpoint(format!(
            "declared shapes imply {expected} parameters but header says {}",
            header.param_count
        )));
    }

    let mut layers = Vec::with_capacity(sizes.len());
    let mut buf = [0u8; 8];
    for (rows, cols) in sizes {
        let mut weight = Matrix::zeros(rows, cols);
        for v in weight.data.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        let mut bias = vec![0.0; rows];
        for v in bias.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))?;
            *v = f64::from_le_bytes(buf);
        }
        layers.push(Layer { weight, bias });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(ModelParams {
        d: header.d,
        time_features: header.time_features,
        widths: header.widths,
        layers,
        init_seed: header.init_seed,
        epoch: header.epoch,
    })
}
