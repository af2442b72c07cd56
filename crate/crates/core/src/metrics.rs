//! Two-sample distribution distances used to score generated batches
//! against reference data: energy distance and sliced Wasserstein-2, with
//! the exact 1-D transport distance as the slicing primitive.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpolant::StatePoint;
use crate::seeding::{self, tag};

/// One metric evaluation, ready for JSON-lines serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub config_digest: String,
}

fn check_batches(a: &[StatePoint], b: &[StatePoint]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let d = a[0].dim();
    if a.iter().chain(b.iter()).any(|p| p.dim() != d) {
        return Err(Error::Shape("inconsistent dimensions across batches".into()));
    }
    Ok(d)
}

fn dist(a: &StatePoint, b: &StatePoint) -> f64 {
    a.coords
        .iter()
        .zip(&b.coords)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Energy distance between two empirical samples:
/// `2 E|a - b| - E|a - a'| - E|a - b'|` with all means taken over full
/// index grids, so identical samples give exactly zero and the value is
/// never negative.
pub fn energy_distance(a: &[StatePoint], b: &[StatePoint]) -> Result<f64> {
    check_batches(a, b)?;
    let n = a.len() as f64;
    let m = b.len() as f64;

    let mut cross = 0.0;
    if a.len() == b.len() {
        // Group (i,j) with (j,i) so that identical batches cancel exactly
        // against the within-sample sums below, and swapping the arguments
        // changes nothing.
        for i in 0..a.len() {
            for j in (i + 1)..b.len() {
                cross += dist(&a[i], &b[j]) + dist(&a[j], &b[i]);
            }
        }
        for (ai, bi) in a.iter().zip(b) {
            cross += dist(ai, bi);
        }
    } else {
        // Canonical iteration order keeps the sum symmetric in (a, b).
        let (outer, inner) = if a.len() >= b.len() { (a, b) } else { (b, a) };
        for oi in outer {
            for ij in inner {
                cross += dist(oi, ij);
            }
        }
    }
    cross /= n * m;

    let mut within_a = 0.0;
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            within_a += dist(&a[i], &a[j]);
        }
    }
    within_a = 2.0 * within_a / (n * n);

    let mut within_b = 0.0;
    for i in 0..b.len() {
        for j in (i + 1)..b.len() {
            within_b += dist(&b[i], &b[j]);
        }
    }
    within_b = 2.0 * within_b / (m * m);

    Ok((2.0 * cross - (within_a + within_b)).max(0.0))
}

/// Exact Wasserstein-2 distance between two 1-D samples of equal size:
/// sorted matching.
pub fn exact_w2_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "sample sizes {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let mse: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    Ok(mse.sqrt())
}

/// Sliced Wasserstein-2: mean of [`exact_w2_1d`] over `n_proj` seeded random
/// unit directions.
pub fn sliced_w2(
    a: &[StatePoint],
    b: &[StatePoint],
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    let d = check_batches(a, b)?;
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "sample sizes {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if n_proj == 0 {
        return Err(Error::Domain("n_proj must be at least 1".into()));
    }
    let mut rng = seeding::rng_for(seed, tag::PROJECTIONS);
    let mut total = 0.0;
    for _ in 0..n_proj {
        let dir = loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
            }
        };
        let pa: Vec<f64> = a.iter().map(|p| p.coords.iter().zip(&dir).map(|(x, u)| x * u).sum()).collect();
        let pb: Vec<f64> = b.iter().map(|p| p.coords.iter().zip(&dir).map(|(x, u)| x * u).sum()).collect();
        total += exact_w2_1d(&pa, &pb)?;
    }
    Ok(total / n_proj as f64)
}
