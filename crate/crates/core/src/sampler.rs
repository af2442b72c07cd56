//! Reverse-time integrators and the time schedules that drive them.
//!
//! Three schedules are provided: a uniform grid, a signal-to-noise time
//! shift `t -> sqrt(r) t / (1 + (sqrt(r) - 1) t)`, and an adaptive rule that
//! sets each step from the cosine similarity between the current state and
//! the velocity the model reports there. Deterministic Euler integrates the
//! probability-flow dynamics; Euler-Maruyama integrates the reverse SDE with
//! the score recovered from the velocity.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::cosine_similarity;
use crate::error::{Error, Result};
use crate::interpolant::{schedule_at, score_from_velocity, ScoreSign, StatePoint, T_EPS};
use crate::model::{self, ModelParams};
use crate::seeding::{self, tag};

/// Anything that can report a velocity at `(x, t)`.
pub trait VelocityField {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &StatePoint, t: f64) -> Result<StatePoint>;
}

impl VelocityField for ModelParams {
    fn dim(&self) -> usize {
        self.d
    }

    fn velocity(&self, x: &StatePoint, t: f64) -> Result<StatePoint> {
        model::forward(self, x, t)
    }
}

/// A strictly decreasing time grid from exactly 1 to exactly 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSchedule {
    times: Vec<f64>,
}

impl TimeSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Domain("schedule needs at least two points".into()));
        }
        if times[0] != 1.0 || *times.last().unwrap() != 0.0 {
            return Err(Error::Domain("schedule endpoints must be exactly 1 and 0".into()));
        }
        if times.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Domain("schedule must be strictly decreasing".into()));
        }
        Ok(Self { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of integration steps (intervals).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Uniform grid with `steps` intervals.
pub fn uniform_schedule(steps: usize) -> Result<TimeSchedule> {
    if steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    let times = (0..=steps).rev().map(|k| k as f64 / steps as f64).collect();
    TimeSchedule::new(times)
}

/// The time shift applied pointwise by [`snr_shift_schedule`]; `ratio = 1`
/// is the identity and 0/1 are fixed points for every ratio.
pub fn shift_time(t: f64, ratio: f64) -> f64 {
    let s = ratio.sqrt();
    s * t / (1.0 + (s - 1.0) * t)
}

/// Uniform grid warped by [`shift_time`]. Endpoints are pinned exactly.
pub fn snr_shift_schedule(steps: usize, ratio: f64) -> Result<TimeSchedule> {
    if steps == 0 {
        return Err(Error::Domain("steps must be at least 1".into()));
    }
    if !(ratio > 0.0) {
        return Err(Error::Domain("ratio must be positive".into()));
    }
    let mut times = Vec::with_capacity(steps + 1);
    times.push(1.0);
    for k in (1..steps).rev() {
        times.push(shift_time(k as f64 / steps as f64, ratio));
    }
    times.push(0.0);
    TimeSchedule::new(times)
}

/// How the per-step cosine signal is aggregated over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CosineMode {
    /// One shared step per batch from the mean per-sample cosine.
    #[default]
    BatchMean,
    /// Each sample integrates on its own clock.
    PerSample,
}

/// Parameters of the cosine-adaptive step rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub dt_min: f64,
    pub dt_max: f64,
    /// Sharpness of the logistic gate.
    pub gain: f64,
    /// Swap the gate orientation (small steps where the drift is misaligned).
    pub invert_gate: bool,
    pub mode: CosineMode,
}

impl AdaptiveConfig {
    /// Bounds chosen so an adaptive run lands near an `n_steps` budget:
    /// `dt_min = 1/(2n)`, `dt_max = 2/n`.
    pub fn for_budget(n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Domain("step budget must be at least 1".into()));
        }
        let n = n_steps as f64;
        Self::checked(0.5 / n, 2.0 / n, 10.0, false, CosineMode::BatchMean)
    }

    pub fn checked(
        dt_min: f64,
        dt_max: f64,
        gain: f64,
        invert_gate: bool,
        mode: CosineMode,
    ) -> Result<Self> {
        let cfg = Self { dt_min, dt_max, gain, invert_gate, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max && self.dt_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < dt_min <= dt_max <= 1, got [{}, {}]",
                self.dt_min, self.dt_max
            )));
        }
        if !(self.gain > 0.0) {
            return Err(Error::Config("gain must be positive".into()));
        }
        Ok(())
    }
}

/// Normalized control signal `(1 - cos) / 2`, in `[0, 1]`.
pub fn control_signal(cos: f64) -> f64 {
    (1.0 - cos) / 2.0
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Logistic gate over the control signal, in `(0, 1)`.
pub fn gate(c_tilde: f64, cfg: &AdaptiveConfig) -> f64 {
    let g = logistic(cfg.gain * (c_tilde - 0.5));
    if cfg.invert_gate {
        1.0 - g
    } else {
        g
    }
}

fn step_from_cosine(cos: f64, cfg: &AdaptiveConfig) -> f64 {
    cfg.dt_min + (cfg.dt_max - cfg.dt_min) * gate(control_signal(cos), cfg)
}

/// Step size proposed by the adaptive rule for a batch of states and
/// velocities, always in `[dt_min, dt_max]`. The integrator additionally
/// clamps the final step so it lands exactly at t = 0.
pub fn adaptive_step(xs: &[StatePoint], vs: &[StatePoint], cfg: &AdaptiveConfig) -> Result<f64> {
    cfg.validate()?;
    if xs.is_empty() || xs.len() != vs.len() {
        return Err(Error::Shape("adaptive_step needs matching nonempty batches".into()));
    }
    let mut mean = 0.0;
    for (x, v) in xs.iter().zip(vs) {
        mean += cosine_similarity(x, v)?;
    }
    mean /= xs.len() as f64;
    Ok(step_from_cosine(mean, cfg))
}

/// Driver for the deterministic sampler: either a fixed grid or the
/// adaptive rule.
#[derive(Debug, Clone)]
pub enum OdeSchedule {
    Fixed(TimeSchedule),
    Adaptive(AdaptiveConfig),
}

/// One synchronized integration step: state of the whole batch at time `t`
/// before the step of size `dt` was taken.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub t: f64,
    pub dt: f64,
    pub states: Vec<StatePoint>,
    pub velocities: Vec<StatePoint>,
    pub cosines: Vec<f64>,
}

/// One step of a single sample integrating on its own clock.
#[derive(Debug, Clone)]
pub struct PerSampleStep {
    pub t: f64,
    pub dt: f64,
    pub cos: f64,
    pub state: StatePoint,
    pub velocity: StatePoint,
}

/// Recorded integration history.
#[derive(Debug, Clone)]
pub enum Trajectory {
    Synchronized(Vec<TrajectoryStep>),
    PerSample(Vec<Vec<PerSampleStep>>),
}

/// Batch-mean cosine per recorded step: `(t, mean, std)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub t: f64,
    pub mean_cos: f64,
    pub std_cos: f64,
}

/// Collapse a synchronized trajectory to its per-step cosine statistics.
pub fn cosine_profile(trajectory: &Trajectory) -> Result<Vec<ProfilePoint>> {
    let steps = match trajectory {
        Trajectory::Synchronized(steps) => steps,
        Trajectory::PerSample(_) => {
            return Err(Error::Domain(
                "cosine profile requires a synchronized trajectory".into(),
            ))
        }
    };
    Ok(steps
        .iter()
        .map(|s| {
            let n = s.cosines.len() as f64;
            let mean = s.cosines.iter().sum::<f64>() / n;
            let var = s.cosines.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n;
            ProfilePoint { t: s.t, mean_cos: mean, std_cos: var.sqrt() }
        })
        .collect())
}

fn draw_initial(field_dim: usize, n: usize, seed: u64) -> Vec<StatePoint> {
    let mut rng = seeding::rng_for(seed, tag::SAMPLER_INIT);
    (0..n)
        .map(|_| {
            StatePoint::new((0..field_dim).map(|_| rng.sample(StandardNormal)).collect())
        })
        .collect()
}

/// Shared Euler update `x + v * delta` (delta is signed, negative in
/// reverse time). The SDE integrator reuses the identical expression for
/// its deterministic legs.
fn euler_update(x: &mut StatePoint, v: &StatePoint, delta: f64) {
    for (xi, vi) in x.coords.iter_mut().zip(&v.coords) {
        *xi += vi * delta;
    }
}

fn batch_velocities<F: VelocityField>(
    field: &F,
    xs: &[StatePoint],
    t: f64,
    step: usize,
) -> Result<Vec<StatePoint>> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState { step, t });
    }
    let vs: Vec<StatePoint> = xs
        .iter()
        .map(|x| field.velocity(x, t))
        .collect::<Result<_>>()?;
    if vs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState { step, t });
    }
    Ok(vs)
}

fn batch_cosines(xs: &[StatePoint], vs: &[StatePoint]) -> Result<Vec<f64>> {
    xs.iter().zip(vs).map(|(x, v)| cosine_similarity(x, v)).collect()
}

/// Integrate the deterministic reverse-time dynamics from t = 1 to t = 0.
///
/// States start as standard Gaussian draws. With a fixed schedule the grid
/// is followed as given; with the adaptive rule each step comes from the
/// batch cosine (or per-sample cosine) and the final step is clamped so the
/// recorded steps sum to exactly 1.
pub fn sample_ode<F: VelocityField>(
    field: &F,
    n: usize,
    schedule: &OdeSchedule,
    seed: u64,
) -> Result<(Vec<StatePoint>, Trajectory)> {
    if n == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut xs = draw_initial(field.dim(), n, seed);
    match schedule {
        OdeSchedule::Fixed(grid) => {
            let mut steps = Vec::with_capacity(grid.steps());
            for (k, w) in grid.times().windows(2).enumerate() {
                let (t, t_next) = (w[0], w[1]);
                let vs = batch_velocities(field, &xs, t, k)?;
                let cosines = batch_cosines(&xs, &vs)?;
                steps.push(TrajectoryStep {
                    t,
                    dt: t - t_next,
                    states: xs.clone(),
                    velocities: vs.clone(),
                    cosines,
                });
                for (x, v) in xs.iter_mut().zip(&vs) {
                    euler_update(x, v, t_next - t);
                }
            }
            check_final(&xs, grid.steps())?;
            Ok((xs, Trajectory::Synchronized(steps)))
        }
        OdeSchedule::Adaptive(cfg) => {
            cfg.validate()?;
            match cfg.mode {
                CosineMode::BatchMean => {
                    let mut steps = Vec::new();
                    let mut consumed = 0.0f64;
                    let mut k = 0usize;
                    loop {
                        let t = 1.0 - consumed;
                        let vs = batch_velocities(field, &xs, t, k)?;
                        let cosines = batch_cosines(&xs, &vs)?;
                        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
                        let proposed = step_from_cosine(mean, cfg);
                        let dt = if proposed >= t { t } else { proposed };
                        steps.push(TrajectoryStep {
                            t,
                            dt,
                            states: xs.clone(),
                            velocities: vs.clone(),
                            cosines,
                        });
                        for (x, v) in xs.iter_mut().zip(&vs) {
                            euler_update(x, v, -dt);
                        }
                        consumed += dt;
                        if dt >= t {
                            break;
                        }
                        k += 1;
                    }
                    check_final(&xs, k)?;
                    Ok((xs, Trajectory::Synchronized(steps)))
                }
                CosineMode::PerSample => {
                    let mut tracks = Vec::with_capacity(n);
                    for x0 in xs.iter() {
                        let mut x = x0.clone();
                        let mut track = Vec::new();
                        let mut consumed = 0.0f64;
                        let mut k = 0usize;
                        loop {
                            let t = 1.0 - consumed;
                            let v = field.velocity(&x, t)?;
                            if !v.is_finite() {
                                return Err(Error::NonFiniteState { step: k, t });
                            }
                            let cos = cosine_similarity(&x, &v)?;
                            let proposed = step_from_cosine(cos, cfg);
                            let dt = if proposed >= t { t } else { proposed };
                            track.push(PerSampleStep {
                                t,
                                dt,
                                cos,
                                state: x.clone(),
                                velocity: v.clone(),
                            });
                            euler_update(&mut x, &v, -dt);
                            consumed += dt;
                            if dt >= t {
                                break;
                            }
                            k += 1;
                        }
                        if !x.is_finite() {
                            return Err(Error::NonFiniteState { step: k, t: 0.0 });
                        }
                        tracks.push((x, track));
                    }
                    let samples: Vec<StatePoint> = tracks.iter().map(|(x, _)| x.clone()).collect();
                    let paths = tracks.into_iter().map(|(_, p)| p).collect();
                    Ok((samples, Trajectory::PerSample(paths)))
                }
            }
        }
    }
}

/// Extra knobs for the stochastic sampler.
#[derive(Debug, Clone, Copy)]
pub struct SdeOptions {
    pub score_sign: ScoreSign,
    /// Multiplies the diffusion coefficient; 0 forces the dynamics to the
    /// deterministic probability flow.
    pub diffusion_scale: f64,
}

impl Default for SdeOptions {
    fn default() -> Self {
        Self { score_sign: ScoreSign::Derived, diffusion_scale: 1.0 }
    }
}

/// Euler-Maruyama on the reverse SDE down the given grid.
///
/// Stochastic steps run while the landing time stays at or above the score
/// clip; the integration then finishes deterministically to t = 0. Grid
/// points below the clip are replaced by a single node at the clip. With
/// `diffusion_scale = 0` every step degenerates to the plain Euler update
/// on the unmodified grid, reproducing [`sample_ode`] bit for bit at equal
/// seeds.
pub fn sample_sde<F: VelocityField>(
    field: &F,
    n: usize,
    schedule: &TimeSchedule,
    seed: u64,
) -> Result<(Vec<StatePoint>, Trajectory)> {
    sample_sde_with(field, n, schedule, seed, SdeOptions::default())
}

pub fn sample_sde_with<F: VelocityField>(
    field: &F,
    n: usize,
    schedule: &TimeSchedule,
    seed: u64,
    opts: SdeOptions,
) -> Result<(Vec<StatePoint>, Trajectory)> {
    if n == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    if !(opts.diffusion_scale >= 0.0) {
        return Err(Error::Config("diffusion_scale must be nonnegative".into()));
    }
    let stochastic = opts.diffusion_scale > 0.0;

    // Clip the grid at the score singularity for stochastic runs.
    let times: Vec<f64> = if stochastic {
        let mut kept: Vec<f64> = schedule.times().iter().copied().filter(|&t| t >= T_EPS).collect();
        if *kept.last().unwrap() > T_EPS {
            kept.push(T_EPS);
        }
        kept.push(0.0);
        kept
    } else {
        schedule.times().to_vec()
    };

    let mut xs = draw_initial(field.dim(), n, seed);
    let mut noise_rng = seeding::rng_for(seed, tag::SDE_NOISE);
    let mut steps = Vec::with_capacity(times.len() - 1);

    for (k, w) in times.windows(2).enumerate() {
        let (t, t_next) = (w[0], w[1]);
        let vs = batch_velocities(field, &xs, t, k)?;
        let cosines = batch_cosines(&xs, &vs)?;
        steps.push(TrajectoryStep {
            t,
            dt: t - t_next,
            states: xs.clone(),
            velocities: vs.clone(),
            cosines,
        });
        let w_t = opts.diffusion_scale * opts.diffusion_scale * schedule_at(t)?.w;
        if stochastic && w_t > 0.0 && t_next >= T_EPS {
            let amp = (w_t * (t - t_next)).sqrt();
            for (x, v) in xs.iter_mut().zip(&vs) {
                let score = score_from_velocity(x, v, t, opts.score_sign)?;
                for ((xi, vi), si) in x.coords.iter_mut().zip(&v.coords).zip(&score.coords) {
                    let drift = vi - 0.5 * w_t * si;
                    let xi_noise: f64 = noise_rng.sample(StandardNormal);
                    *xi += drift * (t_next - t) + amp * xi_noise;
                }
            }
        } else {
            for (x, v) in xs.iter_mut().zip(&vs) {
                euler_update(x, v, t_next - t);
            }
        }
    }
    check_final(&xs, times.len() - 1)?;
    Ok((xs, Trajectory::Synchronized(steps)))
}

fn check_final(xs: &[StatePoint], step: usize) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteState { step, t: 0.0 });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ZeroField(usize);

    impl VelocityField for ZeroField {
        fn dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, _x: &StatePoint, _t: f64) -> Result<StatePoint> {
            Ok(StatePoint::zeros(self.0))
        }
    }

    /// Analytic field of a point mass at the origin: v(x, t) = x / t.
    struct PointMassField(usize);

    impl VelocityField for PointMassField {
        fn dim(&self) -> usize {
            self.0
        }
        fn velocity(&self, x: &StatePoint, t: f64) -> Result<StatePoint> {
            Ok(StatePoint::new(x.coords.iter().map(|c| c / t).collect()))
        }
    }

    #[test]
    fn uniform_schedule_values() {
        assert_eq!(uniform_schedule(1).unwrap().times(), &[1.0, 0.0]);
        assert_eq!(uniform_schedule(4).unwrap().times(), &[1.0, 0.75, 0.5, 0.25, 0.0]);
        let s50 = uniform_schedule(50).unwrap();
        assert_eq!(s50.times().len(), 51);
        assert_eq!(s50.times()[0], 1.0);
        assert_eq!(*s50.times().last().unwrap(), 0.0);
        assert!(uniform_schedule(0).is_err());
    }

    #[test]
    fn shift_identity_and_hand_value() {
        let unit = snr_shift_schedule(10, 1.0).unwrap();
        assert_eq!(unit.times(), uniform_schedule(10).unwrap().times());
        assert!((shift_time(0.5, 4.0) - 2.0 / 3.0).abs() < 1e-15);
        for ratio in [0.2, 1.0, 3.0, 9.5] {
            assert_eq!(shift_time(0.0, ratio), 0.0);
            let s = snr_shift_schedule(7, ratio).unwrap();
            assert_eq!(s.times()[0], 1.0);
            assert_eq!(*s.times().last().unwrap(), 0.0);
        }
    }

    #[test]
    fn schedules_strictly_decreasing() {
        for steps in [1, 2, 5, 50, 333] {
            for ratio in [0.3, 1.0, 4.0] {
                let s = snr_shift_schedule(steps, ratio).unwrap();
                assert!(s.times().windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn adaptive_anchor_values() {
        let cfg = AdaptiveConfig::checked(0.1, 0.4, 10.0, false, CosineMode::BatchMean).unwrap();
        // cos = 0: symmetry point, midpoint step.
        assert!((step_from_cosine(0.0, &cfg) - 0.25).abs() < 1e-15);
        // cos = 1 and -1: logistic at -5 and +5.
        let lo = 1.0 / (1.0 + 5.0f64.exp());
        assert!((gate(control_signal(1.0), &cfg) - lo).abs() < 1e-15);
        assert!((gate(control_signal(-1.0), &cfg) - (1.0 - lo)).abs() < 1e-15);
        // The seven-digit decimals only pin the value to their own precision.
        assert!((gate(control_signal(1.0), &cfg) - 0.0066929).abs() < 5e-8);
        assert!((gate(control_signal(-1.0), &cfg) - 0.9933071).abs() < 5e-8);
    }

    #[test]
    fn gate_inversion_mirrors() {
        let plain = AdaptiveConfig::checked(0.1, 0.4, 10.0, false, CosineMode::BatchMean).unwrap();
        let inv = AdaptiveConfig { invert_gate: true, ..plain };
        for cos in [-1.0, -0.3, 0.0, 0.5, 1.0] {
            let g = gate(control_signal(cos), &plain);
            let gi = gate(control_signal(cos), &inv);
            assert!((g + gi - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_field_returns_initial_draws() {
        let field = ZeroField(2);
        let grid = OdeSchedule::Fixed(uniform_schedule(5).unwrap());
        let (samples, _) = sample_ode(&field, 8, &grid, 3).unwrap();
        let initial = draw_initial(2, 8, 3);
        assert_eq!(samples, initial);

        let adapt = OdeSchedule::Adaptive(AdaptiveConfig::for_budget(5).unwrap());
        let (samples2, _) = sample_ode(&field, 8, &adapt, 3).unwrap();
        assert_eq!(samples2, initial);
    }

    #[test]
    fn single_euler_step_formula() {
        let field = PointMassField(2);
        let grid = OdeSchedule::Fixed(uniform_schedule(1).unwrap());
        let (samples, _) = sample_ode(&field, 4, &grid, 9).unwrap();
        let initial = draw_initial(2, 4, 9);
        for (s, e) in samples.iter().zip(&initial) {
            // x_0 = eps + v(eps, 1) * (0 - 1) = eps - eps = 0 for this field.
            for (si, ei) in s.coords.iter().zip(&e.coords) {
                assert_eq!(*si, ei + (ei / 1.0) * (0.0 - 1.0));
                assert_eq!(*si, 0.0);
            }
        }
    }

    #[test]
    fn adaptive_steps_stay_in_bounds_and_sum_to_one() {
        let field = PointMassField(2);
        let cfg = AdaptiveConfig::for_budget(7).unwrap();
        let (_, traj) = sample_ode(&field, 16, &OdeSchedule::Adaptive(cfg), 21).unwrap();
        let Trajectory::Synchronized(steps) = traj else { panic!() };
        let last = steps.len() - 1;
        for (i, s) in steps.iter().enumerate() {
            if i < last {
                assert!(s.dt >= cfg.dt_min && s.dt <= cfg.dt_max, "step {i}: {}", s.dt);
            } else {
                assert!(s.dt <= cfg.dt_max);
            }
        }
        let total: f64 = steps.iter().map(|s| s.dt).sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn per_sample_tracks_sum_to_one() {
        let field = PointMassField(2);
        let cfg = AdaptiveConfig {
            mode: CosineMode::PerSample,
            ..AdaptiveConfig::for_budget(6).unwrap()
        };
        let (samples, traj) = sample_ode(&field, 5, &OdeSchedule::Adaptive(cfg), 2).unwrap();
        assert_eq!(samples.len(), 5);
        let Trajectory::PerSample(tracks) = traj else { panic!() };
        assert_eq!(tracks.len(), 5);
        for track in &tracks {
            let total: f64 = track.iter().map(|s| s.dt).sum();
            assert_eq!(total, 1.0);
            for s in track {
                assert!((-1.0..=1.0).contains(&s.cos));
            }
        }
    }

    #[test]
    fn sde_zero_diffusion_matches_ode_bitwise() {
        let field = PointMassField(3);
        let grid = uniform_schedule(50).unwrap();
        let (ode, _) = sample_ode(&field, 12, &OdeSchedule::Fixed(grid.clone()), 5).unwrap();
        let opts = SdeOptions { diffusion_scale: 0.0, ..SdeOptions::default() };
        let (sde, _) = sample_sde_with(&field, 12, &grid, 5, opts).unwrap();
        for (a, b) in ode.iter().zip(&sde) {
            for (x, y) in a.coords.iter().zip(&b.coords) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn sde_point_mass_contracts_toward_origin() {
        let field = PointMassField(2);
        let grid = uniform_schedule(50).unwrap();
        let (samples, traj) = sample_sde(&field, 64, &grid, 13).unwrap();
        let Trajectory::Synchronized(steps) = traj else { panic!() };
        let start_norm: f64 =
            steps[0].states.iter().map(StatePoint::norm).sum::<f64>() / 64.0;
        let end_norm: f64 = samples.iter().map(StatePoint::norm).sum::<f64>() / 64.0;
        assert!(end_norm < start_norm, "{end_norm} vs {start_norm}");
    }

    #[test]
    fn sde_is_seed_deterministic() {
        let field = PointMassField(2);
        let grid = uniform_schedule(20).unwrap();
        let (a, _) = sample_sde(&field, 6, &grid, 77).unwrap();
        let (b, _) = sample_sde(&field, 6, &grid, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sde_inserts_clip_node_for_stochastic_runs() {
        let field = PointMassField(2);
        let grid = uniform_schedule(10).unwrap();
        let (_, traj) = sample_sde(&field, 4, &grid, 1).unwrap();
        let Trajectory::Synchronized(steps) = traj else { panic!() };
        // 10 grid intervals plus the clip node before the final leg.
        assert_eq!(steps.len(), 11);
        assert_eq!(steps.last().unwrap().t, T_EPS);
    }

    #[test]
    fn profile_constant_fields() {
        // v = x/t is parallel to x, so the cosine is 1 everywhere.
        let field = PointMassField(2);
        let grid = OdeSchedule::Fixed(uniform_schedule(4).unwrap());
        let (_, traj) = sample_ode(&field, 8, &grid, 4).unwrap();
        let profile = cosine_profile(&traj).unwrap();
        for p in &profile {
            assert!((p.mean_cos - 1.0).abs() < 1e-12);
            assert!(p.std_cos < 1e-12);
        }

        // v = -x gives a constant -1 profile.
        struct Inward;
        impl VelocityField for Inward {
            fn dim(&self) -> usize {
                2
            }
            fn velocity(&self, x: &StatePoint, _t: f64) -> Result<StatePoint> {
                Ok(StatePoint::new(x.coords.iter().map(|c| -c).collect()))
            }
        }
        let grid = OdeSchedule::Fixed(TimeSchedule::new(vec![1.0, 0.7, 0.4, 0.0]).unwrap());
        let (_, traj) = sample_ode(&Inward, 8, &grid, 4).unwrap();
        for p in cosine_profile(&traj).unwrap() {
            assert!((p.mean_cos + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_rejects_per_sample() {
        let field = ZeroField(2);
        let cfg = AdaptiveConfig {
            mode: CosineMode::PerSample,
            ..AdaptiveConfig::for_budget(4).unwrap()
        };
        let (_, traj) = sample_ode(&field, 2, &OdeSchedule::Adaptive(cfg), 0).unwrap();
        assert!(cosine_profile(&traj).is_err());
    }

    #[test]
    fn schedule_constructor_rejects_bad_grids() {
        assert!(TimeSchedule::new(vec![1.0]).is_err());
        assert!(TimeSchedule::new(vec![0.9, 0.0]).is_err());
        assert!(TimeSchedule::new(vec![1.0, 0.1]).is_err());
        assert!(TimeSchedule::new(vec![1.0, 0.5, 0.5, 0.0]).is_err());
        assert!(TimeSchedule::new(vec![1.0, 0.5, 0.0]).is_ok());
    }
}
