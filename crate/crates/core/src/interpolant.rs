//! Linear interpolant between data and noise, with the velocity/score
//! identities needed by the samplers.
//!
//! The forward process is `x_t = alpha_t * x_star + sigma_t * eps` with
//! `alpha_t = 1 - t`, `sigma_t = t`. The regression target for the velocity
//! field is the path derivative `alpha_dot * x_star + sigma_dot * eps`, which
//! for this schedule is simply `eps - x_star`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score evaluation below this time is refused; `sigma_t` vanishes at t = 0.
pub const T_EPS: f64 = 1e-3;

/// Sign convention used when recovering the score from the velocity.
///
/// `Derived` is the convention consistent with the conditional-expectation
/// definition of the score and is the default everywhere. `Flipped` negates
/// it; it exists so the wrong convention can be demonstrated against the
/// closed-form oracles and is not used by any sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSign {
    #[default]
    Derived,
    Flipped,
}

/// Schedule coefficients and their time derivatives at a single time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleValues {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub alpha_dot: f64,
    pub sigma_dot: f64,
    /// Diffusion coefficient of the reverse SDE; equals `sigma` here.
    pub w: f64,
}

/// A point of the generative state space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatePoint {
    pub coords: Vec<f64>,
}

impl StatePoint {
    pub fn new(coords: Vec<f64>) -> Self {
        Self { coords }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { coords: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|c| c.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &StatePoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| a * b)
            .sum()
    }
}

impl From<Vec<f64>> for StatePoint {
    fn from(coords: Vec<f64>) -> Self {
        Self { coords }
    }
}

/// One training tuple: endpoints, time, interpolated state, and the
/// velocity regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub data: StatePoint,
    pub noise: StatePoint,
    pub t: f64,
    pub x_t: StatePoint,
    pub v_target: StatePoint,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_same_dim(a: &StatePoint, b: &StatePoint, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "{what}: dimensions {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Evaluate the linear schedule at time `t` in `[0, 1]`.
pub fn schedule_at(t: f64) -> Result<ScheduleValues> {
    check_time(t)?;
    Ok(ScheduleValues {
        t,
        alpha: 1.0 - t,
        sigma: t,
        alpha_dot: -1.0,
        sigma_dot: 1.0,
        w: t,
    })
}

/// Interpolate one (data, noise) pair at time `t` and attach the velocity
/// target.
pub fn forward_sample(data: &StatePoint, noise: &StatePoint, t: f64) -> Result<PathSample> {
    check_same_dim(data, noise, "forward_sample")?;
    check_time(t)?;
    let s = schedule_at(t)?;
    let x_t: Vec<f64> = data
        .coords
        .iter()
        .zip(&noise.coords)
        .map(|(d, n)| s.alpha * d + s.sigma * n)
        .collect();
    let v_target: Vec<f64> = data
        .coords
        .iter()
        .zip(&noise.coords)
        .map(|(d, n)| s.alpha_dot * d + s.sigma_dot * n)
        .collect();
    Ok(PathSample {
        data: data.clone(),
        noise: noise.clone(),
        t,
        x_t: StatePoint::new(x_t),
        v_target: StatePoint::new(v_target),
    })
}

/// Recover the score from the velocity at `(x, t)`.
///
/// Solving the linear system relating (velocity, state) to the conditional
/// means of data and noise gives
///
/// ```text
/// s(x, t) = -sigma^-1 * (alpha * v - alpha_dot * x) / (alpha * sigma_dot - alpha_dot * sigma)
/// ```
///
/// which under the linear schedule reduces to `-((1 - t) * v + x) / t`.
/// `ScoreSign::Flipped` drops the leading minus; it fails the closed-form
/// oracles and exists only for auditability.
pub fn score_from_velocity(
    x: &StatePoint,
    v: &StatePoint,
    t: f64,
    sign: ScoreSign,
) -> Result<StatePoint> {
    check_same_dim(x, v, "score_from_velocity")?;
    if !(T_EPS..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "time {t} outside [{T_EPS}, 1] for score evaluation"
        )));
    }
    let s = schedule_at(t)?;
    let denom = s.alpha * s.sigma_dot - s.alpha_dot * s.sigma;
    let scale = match sign {
        ScoreSign::Derived => -1.0 / (s.sigma * denom),
        ScoreSign::Flipped => 1.0 / (s.sigma * denom),
    };
    let coords = x
        .coords
        .iter()
        .zip(&v.coords)
        .map(|(xi, vi)| scale * (s.alpha * vi - s.alpha_dot * xi))
        .collect();
    Ok(StatePoint::new(coords))
}

/// Deterministic part of the reverse SDE step, `v - w_t/2 * s`, together
/// with the diffusion magnitude `sqrt(w_t)`.
pub fn sde_drift(x: &StatePoint, v: &StatePoint, s: &StatePoint, t: f64) -> Result<(StatePoint, f64)> {
    check_same_dim(x, v, "sde_drift")?;
    check_same_dim(x, s, "sde_drift")?;
    let sched = schedule_at(t)?;
    let half_w = 0.5 * sched.w;
    let coords = v
        .coords
        .iter()
        .zip(&s.coords)
        .map(|(vi, si)| vi - half_w * si)
        .collect();
    Ok((StatePoint::new(coords), sched.w.sqrt()))
}
