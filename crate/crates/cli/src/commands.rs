//! Subcommand implementations. Every command writes its outputs into a run
//! directory and reports them for the manifest.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};

use cosflow_core::coupling::{
    brute_force_assignment, build_cost_matrix, solve_assignment, CostKind,
};
use cosflow_core::datasets::{self, DatasetSpec};
use cosflow_core::interpolant::StatePoint;
use cosflow_core::metrics::{energy_distance, sliced_w2, MetricReport};
use cosflow_core::model::{load_checkpoint, save_checkpoint, ModelParams};
use cosflow_core::sampler::{
    cosine_profile, sample_ode, sample_sde_with, snr_shift_schedule, uniform_schedule,
    AdaptiveConfig, OdeSchedule, SdeOptions, Trajectory,
};
use cosflow_core::seeding;
use cosflow_core::trainer::{self, CouplingStrategy, RunRecord};

use crate::config::{ExperimentConfig, SamplerKind};
use crate::manifest::{sha256_hex_bytes, OutputFile};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_points_csv(points: &[StatePoint], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let d = points.first().map(|p| p.dim()).unwrap_or(0);
    let header: Vec<String> = (0..d).map(|i| format!("x{i}")).collect();
    writeln!(w, "{}", header.join(","))?;
    for p in points {
        let row: Vec<String> = p.coords.iter().map(|c| c.to_string()).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn write_records(records: &[RunRecord], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    trainer::write_records_csv(records, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_trajectory_csv(trajectory: &Trajectory, out_dir: &Path) -> Result<OutputFile> {
    match trajectory {
        Trajectory::Synchronized(steps) => {
            let profile = cosine_profile(trajectory)?;
            let mut w = create(&out_dir.join("trajectory.csv"))?;
            writeln!(w, "step,t,dt,mean_cos,std_cos")?;
            for (k, (s, p)) in steps.iter().zip(&profile).enumerate() {
                writeln!(w, "{},{},{},{},{}", k, s.t, s.dt, p.mean_cos, p.std_cos)?;
            }
            w.flush()?;
            Ok(OutputFile::stable("trajectory.csv"))
        }
        Trajectory::PerSample(tracks) => {
            let mut w = create(&out_dir.join("tracks.csv"))?;
            writeln!(w, "sample,step,t,dt,cos")?;
            for (i, track) in tracks.iter().enumerate() {
                for (k, s) in track.iter().enumerate() {
                    writeln!(w, "{},{},{},{},{}", i, k, s.t, s.dt, s.cos)?;
                }
            }
            w.flush()?;
            Ok(OutputFile::stable("tracks.csv"))
        }
    }
}

pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<OutputFile>> {
    let data = datasets::generate(&cfg.dataset)?;
    write_points_csv(&data, &out_dir.join("data.csv"))?;
    Ok(vec![OutputFile::stable("data.csv")])
}

pub fn train(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<OutputFile>> {
    let tc = cfg.to_train_config(cfg.seed);
    let (params, records) = trainer::train(&tc)?;
    write_records(&records, &out_dir.join("records.csv"))?;
    save_checkpoint(&params, &out_dir.join("model.ckpt"))?;
    Ok(vec![
        if cfg.trainer.record_timing {
            OutputFile::volatile("records.csv")
        } else {
            OutputFile::stable("records.csv")
        },
        OutputFile::stable("model.ckpt"),
    ])
}

pub fn finetune(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: &Path,
    extra_epochs: u64,
    strategy: CouplingStrategy,
) -> Result<Vec<OutputFile>> {
    let tc = cfg.to_train_config(cfg.seed);
    let (params, records) = trainer::finetune(checkpoint, extra_epochs, strategy, &tc)?;
    write_records(&records, &out_dir.join("records.csv"))?;
    save_checkpoint(&params, &out_dir.join("model.ckpt"))?;
    Ok(vec![
        if cfg.trainer.record_timing {
            OutputFile::volatile("records.csv")
        } else {
            OutputFile::stable("records.csv")
        },
        OutputFile::stable("model.ckpt"),
    ])
}

fn run_sampler(
    cfg: &ExperimentConfig,
    params: &ModelParams,
) -> Result<(Vec<StatePoint>, Trajectory)> {
    match cfg.sampler.kind {
        SamplerKind::Ode => {
            let schedule = cfg.ode_schedule()?;
            Ok(sample_ode(params, cfg.sampler.n_samples, &schedule, cfg.seed)?)
        }
        SamplerKind::Sde => {
            let schedule = cfg.fixed_schedule()?;
            let opts = SdeOptions {
                score_sign: cfg.sampler.score_sign,
                diffusion_scale: cfg.sampler.diffusion_scale,
            };
            Ok(sample_sde_with(params, cfg.sampler.n_samples, &schedule, cfg.seed, opts)?)
        }
    }
}

pub fn sample(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> Result<Vec<OutputFile>> {
    let params = load_checkpoint(checkpoint)?;
    let (samples, trajectory) = run_sampler(cfg, &params)?;
    write_points_csv(&samples, &out_dir.join("samples.csv"))?;
    let traj_file = write_trajectory_csv(&trajectory, out_dir)?;
    Ok(vec![OutputFile::stable("samples.csv"), traj_file])
}

fn reference_batch(cfg: &ExperimentConfig, n: usize) -> Result<Vec<StatePoint>> {
    let spec = DatasetSpec {
        n,
        seed: cfg.dataset.seed.wrapping_add(cfg.metrics.reference_seed),
        ..cfg.dataset.clone()
    };
    Ok(datasets::generate(&spec)?)
}

pub fn eval(cfg: &ExperimentConfig, out_dir: &Path, checkpoint: &Path) -> Result<Vec<OutputFile>> {
    let params = load_checkpoint(checkpoint)?;
    let (samples, _) = run_sampler(cfg, &params)?;
    let reference = reference_batch(cfg, cfg.metrics.n_reference)?;

    let digest = sha256_hex_bytes(cfg.to_resolved_toml()?.as_bytes())[..16].to_string();
    let energy = energy_distance(&samples, &reference)?;
    let m = samples.len().min(reference.len());
    let sliced = sliced_w2(&samples[..m], &reference[..m], cfg.metrics.n_proj, cfg.seed)?;

    let mut w = create(&out_dir.join("metrics.jsonl"))?;
    for report in [
        MetricReport {
            metric: "energy_distance".into(),
            value: energy,
            n_samples: samples.len(),
            seed: cfg.seed,
            config_digest: digest.clone(),
        },
        MetricReport {
            metric: "sliced_w2".into(),
            value: sliced,
            n_samples: m,
            seed: cfg.seed,
            config_digest: digest.clone(),
        },
    ] {
        writeln!(w, "{}", serde_json::to_string(&report)?)?;
    }
    w.flush()?;
    Ok(vec![OutputFile::stable("metrics.jsonl")])
}

pub fn schedule_dump(
    out_dir: &Path,
    steps: usize,
    ratio: f64,
    checkpoint: Option<&Path>,
    seed: u64,
) -> Result<Vec<OutputFile>> {
    let uniform = uniform_schedule(steps)?;
    let shifted = snr_shift_schedule(steps, ratio)?;
    let mut w = create(&out_dir.join("schedules.csv"))?;
    writeln!(w, "k,t_uniform,t_snr_shift")?;
    for (k, (u, s)) in uniform.times().iter().zip(shifted.times()).enumerate() {
        writeln!(w, "{},{},{}", k, u, s)?;
    }
    w.flush()?;
    let mut outputs = vec![OutputFile::stable("schedules.csv")];

    // The adaptive schedule only exists relative to a velocity field, so it
    // is produced by simulation when a checkpoint is supplied.
    if let Some(ckpt) = checkpoint {
        let params = load_checkpoint(ckpt)?;
        let cfg = AdaptiveConfig::for_budget(steps)?;
        let (_, trajectory) = sample_ode(&params, 256, &OdeSchedule::Adaptive(cfg), seed)?;
        let Trajectory::Synchronized(traj_steps) = trajectory else {
            bail!("adaptive schedule simulation must be synchronized");
        };
        let mut aw = create(&out_dir.join("adaptive_schedule.csv"))?;
        writeln!(aw, "step,t,dt")?;
        for (k, s) in traj_steps.iter().enumerate() {
            writeln!(aw, "{},{},{}", k, s.t, s.dt)?;
        }
        aw.flush()?;
        outputs.push(OutputFile::stable("adaptive_schedule.csv"));
    }
    Ok(outputs)
}

pub fn couple_bench(out_dir: &Path, sizes: &[usize], seed: u64) -> Result<Vec<OutputFile>> {
    if sizes.is_empty() {
        bail!("need at least one size");
    }
    let mut bench = create(&out_dir.join("bench.csv"))?;
    writeln!(bench, "n,cost_kind,micros")?;
    let mut plans = Vec::new();

    for &n in sizes {
        if n == 0 {
            bail!("sizes must be positive");
        }
        let d = 8usize;
        let data = datasets::standard_gaussian(n, d, seeding::derive_seed(seed, n as u64));
        let noise =
            datasets::standard_gaussian(n, d, seeding::derive_seed(seed, (n as u64) << 32));
        for kind in [CostKind::NegCosine, CostKind::SqEuclidean] {
            let kind_name = match kind {
                CostKind::NegCosine => "neg_cosine",
                CostKind::SqEuclidean => "sq_euclidean",
            };
            let cost = build_cost_matrix(&data, &noise, kind)?;
            let started = Instant::now();
            let plan = solve_assignment(&cost);
            let micros = started.elapsed().as_micros();
            writeln!(bench, "{},{},{}", n, kind_name, micros)?;
            let brute_match = if n <= 8 {
                let oracle = brute_force_assignment(&cost)?;
                Some((plan.total_cost - oracle.total_cost).abs() < 1e-9)
            } else {
                None
            };
            plans.push(serde_json::json!({
                "n": n,
                "cost_kind": kind,
                "plan": plan,
                "brute_force_cost_match": brute_match,
            }));
        }
    }
    bench.flush()?;
    std::fs::write(
        out_dir.join("plans.json"),
        serde_json::to_string_pretty(&plans)?,
    )?;
    Ok(vec![OutputFile::volatile("bench.csv"), OutputFile::stable("plans.json")])
}

pub fn probe_grad_noise(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    checkpoint: &Path,
    n_batches: usize,
) -> Result<Vec<OutputFile>> {
    let params = load_checkpoint(checkpoint)?;
    let data = datasets::generate(&cfg.dataset)?;
    let mut w = create(&out_dir.join("grad_noise.jsonl"))?;
    for strategy in [
        CouplingStrategy::Independent,
        CouplingStrategy::CosineOt,
        CouplingStrategy::EuclideanOt,
    ] {
        let stats = trainer::gradient_noise_probe(
            &params,
            &data,
            strategy,
            n_batches,
            cfg.trainer.batch_size,
            cfg.seed,
        )?;
        writeln!(w, "{}", serde_json::to_string(&stats)?)?;
    }
    w.flush()?;
    Ok(vec![OutputFile::stable("grad_noise.jsonl")])
}

/// Train per seed, integrate with trajectory recording, and tabulate the
/// batch-mean cosine between state and velocity at t = 0.9 and t = 0.1.
pub fn repro_fig2a(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<OutputFile>> {
    let mut outputs = Vec::new();
    let mut summary = create(&out_dir.join("fig2a_summary.csv"))?;
    writeln!(summary, "seed,cos_t09,cos_t01,decreasing_toward_data")?;
    for &seed in &cfg.seeds {
        let tc = cfg.to_train_config(seed);
        let (params, _) = trainer::train(&tc)?;
        let grid = OdeSchedule::Fixed(uniform_schedule(10)?);
        let (_, trajectory) = sample_ode(&params, cfg.sampler.n_samples, &grid, seed)?;
        let profile = cosine_profile(&trajectory)?;

        let name = format!("fig2a_profile_seed{seed}.csv");
        let mut w = create(&out_dir.join(&name))?;
        writeln!(w, "step,t,mean_cos,std_cos")?;
        for (k, p) in profile.iter().enumerate() {
            writeln!(w, "{},{},{},{}", k, p.t, p.mean_cos, p.std_cos)?;
        }
        w.flush()?;
        outputs.push(OutputFile::stable(name));

        // 10-step uniform grid: index 1 sits at t = 0.9, index 9 at t = 0.1.
        let cos09 = profile[1].mean_cos;
        let cos01 = profile[9].mean_cos;
        writeln!(summary, "{},{},{},{}", seed, cos09, cos01, cos09 > cos01)?;
    }
    summary.flush()?;
    outputs.push(OutputFile::stable("fig2a_summary.csv"));
    Ok(outputs)
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Compare uniform, SNR-shifted, and both adaptive gate orientations at
/// matched step budgets, scoring each with sliced Wasserstein-2 against a
/// fresh reference batch.
pub fn repro_fid_vs_steps(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    budgets: &[usize],
) -> Result<Vec<OutputFile>> {
    if budgets.is_empty() {
        bail!("need at least one step budget");
    }
    let reference = reference_batch(cfg, cfg.sampler.n_samples)?;

    let mut table = create(&out_dir.join("fid_table.csv"))?;
    writeln!(table, "seed,steps,schedule,sliced_w2")?;
    // values[(budget, schedule)] -> per-seed metric
    let schedules = ["uniform", "snr_shift", "adaptive_plain", "adaptive_inverted"];
    let mut values: std::collections::BTreeMap<(usize, &str), Vec<f64>> = Default::default();

    for &seed in &cfg.seeds {
        let tc = cfg.to_train_config(seed);
        let (params, _) = trainer::train(&tc)?;
        for &budget in budgets {
            for name in schedules {
                let schedule = match name {
                    "uniform" => OdeSchedule::Fixed(uniform_schedule(budget)?),
                    "snr_shift" => {
                        OdeSchedule::Fixed(snr_shift_schedule(budget, cfg.sampler.ratio)?)
                    }
                    "adaptive_plain" => OdeSchedule::Adaptive(AdaptiveConfig::for_budget(budget)?),
                    _ => OdeSchedule::Adaptive(AdaptiveConfig {
                        invert_gate: true,
                        ..AdaptiveConfig::for_budget(budget)?
                    }),
                };
                let (samples, _) = sample_ode(&params, cfg.sampler.n_samples, &schedule, seed)?;
                let value = sliced_w2(&samples, &reference, cfg.metrics.n_proj, seed)?;
                writeln!(table, "{},{},{},{}", seed, budget, name, value)?;
                values.entry((budget, name)).or_default().push(value);
            }
        }
    }
    table.flush()?;

    let mut summary = create(&out_dir.join("fid_summary.csv"))?;
    writeln!(
        summary,
        "steps,median_uniform,median_snr_shift,median_adaptive_plain,median_adaptive_inverted,winning_orientation,adaptive_wins_vs_uniform,n_seeds"
    )?;
    for &budget in budgets {
        let med = |name: &str| median(&mut values[&(budget, name)].clone());
        let uni = values[&(budget, "uniform")].clone();
        let count_wins = |name: &str| {
            values[&(budget, name)]
                .iter()
                .zip(&uni)
                .filter(|(a, u)| a <= u)
                .count()
        };
        let wins_v = count_wins("adaptive_plain");
        let wins_i = count_wins("adaptive_inverted");
        let (orientation, wins) = if wins_v >= wins_i {
            ("plain", wins_v)
        } else {
            ("inverted", wins_i)
        };
        writeln!(
            summary,
            "{},{},{},{},{},{},{},{}",
            budget,
            med("uniform"),
            med("snr_shift"),
            med("adaptive_plain"),
            med("adaptive_inverted"),
            orientation,
            wins,
            cfg.seeds.len()
        )?;
    }
    summary.flush()?;
    Ok(vec![OutputFile::stable("fid_table.csv"), OutputFile::stable("fid_summary.csv")])
}

/// Base-train per seed, then fine-tune one extra epoch under the cosine
/// coupling versus the independent baseline, scoring both with the energy
/// distance against a fresh reference batch.
pub fn repro_finetune(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<OutputFile>> {
    let reference = reference_batch(cfg, cfg.metrics.n_reference)?;
    let mut table = create(&out_dir.join("finetune_table.csv"))?;
    writeln!(table, "seed,arm,energy_distance")?;
    let mut cosine_wins = 0usize;

    for &seed in &cfg.seeds {
        let tc = cfg.to_train_config(seed);
        let (base, _) = trainer::train(&tc)?;
        let ckpt = out_dir.join(format!("base_seed{seed}.ckpt"));
        save_checkpoint(&base, &ckpt)?;

        let arm_value = |strategy: CouplingStrategy| -> Result<f64> {
            let (tuned, _) = trainer::finetune(&ckpt, 1, strategy, &tc)?;
            let grid = OdeSchedule::Fixed(uniform_schedule(cfg.sampler.steps)?);
            let (samples, _) = sample_ode(&tuned, cfg.sampler.n_samples, &grid, seed)?;
            Ok(energy_distance(&samples, &reference)?)
        };
        let cosine = arm_value(CouplingStrategy::CosineOt)?;
        let independent = arm_value(CouplingStrategy::Independent)?;
        writeln!(table, "{},cosine_ot,{}", seed, cosine)?;
        writeln!(table, "{},independent,{}", seed, independent)?;
        if cosine <= independent {
            cosine_wins += 1;
        }
    }
    table.flush()?;

    let mut summary = create(&out_dir.join("finetune_summary.csv"))?;
    writeln!(summary, "cosine_wins,n_seeds")?;
    writeln!(summary, "{},{}", cosine_wins, cfg.seeds.len())?;
    summary.flush()?;

    let mut outputs = vec![
        OutputFile::stable("finetune_table.csv"),
        OutputFile::stable("finetune_summary.csv"),
    ];
    for &seed in &cfg.seeds {
        outputs.push(OutputFile::stable(format!("base_seed{seed}.ckpt")));
    }
    Ok(outputs)
}

pub fn parse_strategy(s: &str) -> Result<CouplingStrategy> {
    match s {
        "independent" => Ok(CouplingStrategy::Independent),
        "cosine_ot" => Ok(CouplingStrategy::CosineOt),
        "euclidean_ot" => Ok(CouplingStrategy::EuclideanOt),
        other => Err(anyhow!(
            "unknown strategy '{other}' (expected independent | cosine_ot | euclidean_ot)"
        )),
    }
}

pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .with_context(|| format!("bad list entry '{part}'"))
        })
        .collect()
}
