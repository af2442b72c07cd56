//! Training loop with pluggable noise coupling, a decoupled-weight-decay
//! adaptive-moment optimizer, checkpoint-resumed fine-tuning, and a probe
//! for per-batch gradient noise.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::{build_cost_matrix, solve_assignment, CostKind};
use crate::datasets::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::interpolant::{forward_sample, PathSample, StatePoint};
use crate::model::{
    init_params_with, load_checkpoint, loss_and_grad, GradientSet, ModelParams,
    DEFAULT_TIME_FEATURES,
};
use crate::seeding::{self, tag};

/// How each data point is paired with a noise draw before interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CouplingStrategy {
    /// Pair in draw order; the standard estimator.
    #[default]
    Independent,
    /// Re-pair by maximizing total cosine similarity.
    CosineOt,
    /// Re-pair by minimizing total squared Euclidean distance.
    EuclideanOt,
}

impl fmt::Display for CouplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CouplingStrategy::Independent => "independent",
            CouplingStrategy::CosineOt => "cosine_ot",
            CouplingStrategy::EuclideanOt => "euclidean_ot",
        };
        f.write_str(s)
    }
}

/// Optimizer hyperparameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl OptimHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: GradientSet,
    pub v: GradientSet,
    pub step: u64,
    pub hyper: OptimHyper,
}

impl OptimState {
    pub fn new(hyper: OptimHyper, params: &ModelParams) -> Self {
        Self {
            m: GradientSet::zeros_like(params),
            v: GradientSet::zeros_like(params),
            step: 0,
            hyper,
        }
    }
}

fn shapes_match(a: &GradientSet, params: &ModelParams) -> bool {
    a.layers.len() == params.layers.len()
        && a.layers.iter().zip(&params.layers).all(|(g, p)| {
            g.weight.rows == p.weight.rows
                && g.weight.cols == p.weight.cols
                && g.bias.len() == p.bias.len()
        })
}

/// One adaptive-moment update with bias correction and decoupled weight
/// decay. Deterministic; mutates `params` and `state` in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &GradientSet,
    state: &mut OptimState,
) -> Result<()> {
    if !shapes_match(grads, params) || !shapes_match(&state.m, params) {
        return Err(Error::Shape("gradient/optimizer shapes do not match parameters".into()));
    }
    state.step += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.step as i32);
    let bc2 = 1.0 - h.beta2.powi(state.step as i32);

    for li in 0..params.layers.len() {
        let pw = &mut params.layers[li].weight.data;
        let gw = &grads.layers[li].weight.data;
        let mw = &mut state.m.layers[li].weight.data;
        let vw = &mut state.v.layers[li].weight.data;
        for i in 0..pw.len() {
            let g = gw[i];
            mw[i] = h.beta1 * mw[i] + (1.0 - h.beta1) * g;
            vw[i] = h.beta2 * vw[i] + (1.0 - h.beta2) * g * g;
            let m_hat = mw[i] / bc1;
            let v_hat = vw[i] / bc2;
            pw[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * pw[i]);
        }
        let pb = &mut params.layers[li].bias;
        let gb = &grads.layers[li].bias;
        let mb = &mut state.m.layers[li].bias;
        let vb = &mut state.v.layers[li].bias;
        for i in 0..pb.len() {
            let g = gb[i];
            mb[i] = h.beta1 * mb[i] + (1.0 - h.beta1) * g;
            vb[i] = h.beta2 * vb[i] + (1.0 - h.beta2) * g * g;
            let m_hat = mb[i] / bc1;
            let v_hat = vb[i] / bc2;
            // Biases are exempt from weight decay.
            pb[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps));
        }
    }
    Ok(())
}

/// Per-step training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_time_s: f64,
    pub strategy: CouplingStrategy,
    pub seed: u64,
}

/// Stream records as CSV with the fixed column set.
pub fn write_records_csv<W: Write>(records: &[RunRecord], w: &mut W) -> Result<()> {
    writeln!(w, "epoch,step,loss,grad_norm,wall_time_s,strategy,seed")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.epoch, r.step, r.loss, r.grad_norm, r.wall_time_s, r.strategy, r.seed
        )?;
    }
    Ok(())
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dataset: DatasetSpec,
    pub epochs: u64,
    pub batch_size: usize,
    pub strategy: CouplingStrategy,
    pub seed: u64,
    pub optim: OptimHyper,
    pub widths: Vec<usize>,
    pub time_features: usize,
    /// When false (the default) `wall_time_s` is recorded as 0 so that runs
    /// are byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            epochs: 1,
            batch_size: 128,
            strategy: CouplingStrategy::Independent,
            seed: 0,
            optim: OptimHyper::default(),
            widths: vec![128, 128, 128],
            time_features: DEFAULT_TIME_FEATURES,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.batch_size > self.dataset.n {
            return Err(Error::Config(format!(
                "batch_size {} exceeds dataset size {}",
                self.batch_size, self.dataset.n
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be nonempty and positive".into()));
        }
        if self.time_features == 0 {
            return Err(Error::Config("time_features must be at least 1".into()));
        }
        Ok(())
    }
}

/// Draw one standard-Gaussian noise point per data point, re-pair according
/// to the strategy, then sample a time per pair and interpolate.
///
/// The multiset of noise vectors entering the interpolant is exactly the
/// multiset drawn, for every strategy; only the pairing changes.
pub fn make_training_batch(
    data: &[StatePoint],
    rng: &mut ChaCha12Rng,
    strategy: CouplingStrategy,
) -> Result<Vec<PathSample>> {
    if data.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let d = data[0].dim();
    let noise: Vec<StatePoint> = (0..data.len())
        .map(|_| StatePoint::new((0..d).map(|_| rng.sample(StandardNormal)).collect()))
        .collect();

    let perm: Vec<usize> = match strategy {
        CouplingStrategy::Independent => (0..data.len()).collect(),
        CouplingStrategy::CosineOt => {
            solve_assignment(&build_cost_matrix(data, &noise, CostKind::NegCosine)?).perm
        }
        CouplingStrategy::EuclideanOt => {
            solve_assignment(&build_cost_matrix(data, &noise, CostKind::SqEuclidean)?).perm
        }
    };

    data.iter()
        .enumerate()
        .map(|(i, x)| {
            let t: f64 = rng.random();
            forward_sample(x, &noise[perm[i]], t)
        })
        .collect()
}

fn run_epochs(
    mut params: ModelParams,
    data: &[StatePoint],
    config: &TrainConfig,
    epochs: u64,
    strategy: CouplingStrategy,
) -> Result<(ModelParams, Vec<RunRecord>)> {
    let steps_per_epoch = data.len() / config.batch_size;
    if epochs > 0 && steps_per_epoch == 0 {
        return Err(Error::Config("dataset smaller than one batch".into()));
    }
    let mut opt = OptimState::new(config.optim, &params);
    let mut records = Vec::new();
    let start = Instant::now();

    for _ in 0..epochs {
        let epoch = params.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = seeding::rng_for_indexed(config.seed, tag::EPOCH_SHUFFLE, epoch);
        order.shuffle(&mut shuffle_rng);
        let mut noise_rng = seeding::rng_for_indexed(config.seed, tag::BATCH_NOISE, epoch);

        for b in 0..steps_per_epoch {
            let batch: Vec<StatePoint> = order[b * config.batch_size..(b + 1) * config.batch_size]
                .iter()
                .map(|&i| data[i].clone())
                .collect();
            let samples = make_training_batch(&batch, &mut noise_rng, strategy)?;
            let (loss, grads) = loss_and_grad(&params, &samples)?;
            optimizer_step(&mut params, &grads, &mut opt)?;
            records.push(RunRecord {
                epoch,
                step: epoch * steps_per_epoch as u64 + b as u64,
                loss,
                grad_norm: grads.norm(),
                wall_time_s: if config.record_timing {
                    start.elapsed().as_secs_f64()
                } else {
                    0.0
                },
                strategy,
                seed: config.seed,
            });
        }
        params.epoch += 1;
    }
    Ok((params, records))
}

/// Train a fresh model under `config`. Fully reproducible given the seed.
pub fn train(config: &TrainConfig) -> Result<(ModelParams, Vec<RunRecord>)> {
    config.validate()?;
    let data = datasets::generate(&config.dataset)?;
    let params = init_params_with(
        config.seed,
        &config.widths,
        config.dataset.d,
        config.time_features,
    )?;
    run_epochs(params, &data, config, config.epochs, config.strategy)
}

/// Resume a checkpoint and train `extra_epochs` more with the given
/// strategy. Optimizer moments start fresh; the epoch counter continues
/// from the checkpoint.
pub fn finetune(
    checkpoint: &Path,
    extra_epochs: u64,
    strategy: CouplingStrategy,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<RunRecord>)> {
    config.validate()?;
    let params = load_checkpoint(checkpoint)?;
    if params.d != config.dataset.d {
        return Err(Error::Checkpoint(format!(
            "checkpoint dimension {} does not match dataset dimension {}",
            params.d, config.dataset.d
        )));
    }
    if params.widths != config.widths {
        return Err(Error::Checkpoint(format!(
            "checkpoint widths {:?} do not match configured widths {:?}",
            params.widths, config.widths
        )));
    }
    let data = datasets::generate(&config.dataset)?;
    run_epochs(params, &data, config, extra_epochs, strategy)
}

/// Summary statistics of per-batch gradients at frozen parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradNoiseStats {
    pub n_batches: usize,
    pub batch_size: usize,
    pub strategy: CouplingStrategy,
    pub seed: u64,
    /// Trace of the empirical covariance of the flattened gradient.
    pub grad_cov_trace: f64,
    /// Unbiased variance of the per-batch loss.
    pub loss_variance: f64,
    pub mean_loss: f64,
}

/// Gradient/loss spread over explicitly provided batches. Identical batches
/// give exactly zero variance.
pub fn gradient_noise_from_batches(
    params: &ModelParams,
    batches: &[Vec<PathSample>],
) -> Result<(f64, f64, f64)> {
    if batches.len() < 2 {
        return Err(Error::Domain("need at least 2 batches".into()));
    }
    let mut losses = Vec::with_capacity(batches.len());
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(batches.len());
    for batch in batches {
        let (loss, grad) = loss_and_grad(params, batch)?;
        losses.push(loss);
        let mut flat = Vec::with_capacity(grad.param_count());
        grad.for_each(|g| flat.push(g));
        grads.push(flat);
    }

    let nb = batches.len() as f64;
    let p = grads[0].len();
    // Welford keeps the spread exactly zero for identical batches.
    let mut trace = 0.0;
    for j in 0..p {
        let (_, s) = welford(grads.iter().map(|g| g[j]));
        trace += s / (nb - 1.0);
    }
    let (mean_loss, loss_s) = welford(losses.iter().copied());
    let loss_variance = loss_s / (nb - 1.0);
    Ok((trace, loss_variance, mean_loss))
}

/// Running mean and sum of squared deviations.
fn welford(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut mean = 0.0;
    let mut s = 0.0;
    let mut k = 0.0;
    for x in values {
        k += 1.0;
        let delta = x - mean;
        mean += delta / k;
        s += delta * (x - mean);
    }
    (mean, s)
}

/// With parameters frozen, draw `n_batches` independent minibatches and
/// report the spread of their gradients and losses.
pub fn gradient_noise_probe(
    params: &ModelParams,
    data: &[StatePoint],
    strategy: CouplingStrategy,
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<GradNoiseStats> {
    if n_batches < 2 {
        return Err(Error::Domain("need at least 2 batches".into()));
    }
    if batch_size == 0 || batch_size > data.len() {
        return Err(Error::Domain("bad batch size".into()));
    }

    let mut batches = Vec::with_capacity(n_batches);
    for b in 0..n_batches {
        let mut rng = seeding::rng_for_indexed(seed, tag::GRAD_PROBE, b as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let batch: Vec<StatePoint> = order[..batch_size].iter().map(|&i| data[i].clone()).collect();
        batches.push(make_training_batch(&batch, &mut rng, strategy)?);
    }
    let (grad_cov_trace, loss_variance, mean_loss) =
        gradient_noise_from_batches(params, &batches)?;

    Ok(GradNoiseStats {
        n_batches,
        batch_size,
        strategy,
        seed,
        grad_cov_trace,
        loss_variance,
        mean_loss,
    })
}
