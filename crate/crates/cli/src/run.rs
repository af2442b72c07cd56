//! Argument definitions and dispatch. Kept out of `main.rs` so the
//! integration tests can drive the full command path in-process.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cosflow_core::trainer::CouplingStrategy;

use crate::commands;
use crate::config::{default_out_root, ExperimentConfig};
use crate::manifest::{
    self, OutputFile, CONFIG_PLACEHOLDER, RESOLVED_CONFIG_NAME,
};

/// Errors that indicate misuse rather than a runtime failure; they exit
/// with status 2 like flag-parsing errors do.
#[derive(Debug)]
pub struct UsageError(pub anyhow::Error);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(err: anyhow::Error) -> anyhow::Error {
    anyhow::Error::new(UsageError(err))
}

#[derive(Debug, Parser)]
#[command(name = "cosflow", version, about = "Flow-matching lab: train, couple, sample, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (defaults to the config's out_dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. --set trainer.epochs=3 (repeatable;
    /// flags win over the file).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Record wall-clock time in records.csv (makes the file volatile).
    #[arg(long)]
    pub timing: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if self.timing {
            overrides.push("trainer.record_timing=true".into());
        }
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_toml("", &overrides),
        }
        .map_err(usage)?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReproTarget {
    /// Cosine-vs-time profile of a trained model.
    Fig2a,
    /// Schedule comparison at matched step budgets.
    FidVsSteps,
    /// One-extra-epoch coupling fine-tune versus the independent baseline.
    Finetune,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Generate a synthetic dataset and write it as CSV.
    GenData(ConfigArgs),
    /// Train a velocity-field model; writes records.csv and model.ckpt.
    Train(ConfigArgs),
    /// Resume a checkpoint for extra epochs under a coupling strategy.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        extra_epochs: u64,
        /// independent | cosine_ot | euclidean_ot
        #[arg(long, default_value = "cosine_ot")]
        strategy: String,
    },
    /// Draw samples from a trained model.
    Sample {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sample and score against a fresh reference batch.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Emit the uniform and SNR-shifted grids (and, given a checkpoint, the
    /// simulated adaptive schedule) as CSV.
    ScheduleDump {
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 3.0)]
        ratio: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the assignment solver across batch sizes.
    CoupleBench {
        #[arg(long, default_value = "4,8,16,32,64,128")]
        sizes: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-batch gradient spread at a frozen checkpoint, per strategy.
    ProbeGradNoise {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n_batches: usize,
    },
    /// Multi-seed experiment recipes.
    Repro {
        #[arg(value_enum)]
        target: ReproTarget,
        #[command(flatten)]
        config: ConfigArgs,
        /// Step budgets for fid-vs-steps.
        #[arg(long = "steps", default_value = "5,10,20,50")]
        steps_list: String,
    },
    /// Re-execute a run from its manifest and compare output digests.
    VerifyRun {
        run_dir: PathBuf,
    },
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))
}

fn resolve_out(flag: &Option<PathBuf>, cfg: Option<&ExperimentConfig>, fallback: &str) -> PathBuf {
    if let Some(o) = flag {
        return o.clone();
    }
    match cfg {
        Some(c) => c.out_dir.clone(),
        None => default_out_root().join(fallback),
    }
}

/// Write the resolved config, run the command body, then seal the manifest.
fn config_command(
    cfg: &ExperimentConfig,
    out: &Path,
    command: Vec<String>,
    seeds: Vec<u64>,
    body: impl FnOnce(&ExperimentConfig, &Path) -> Result<Vec<OutputFile>>,
) -> Result<()> {
    prepare_out(out)?;
    std::fs::write(out.join(RESOLVED_CONFIG_NAME), cfg.to_resolved_toml()?)?;
    let mut outputs = body(cfg, out)?;
    outputs.push(OutputFile::stable(RESOLVED_CONFIG_NAME));
    manifest::write_manifest(out, command, seeds, &outputs)?;
    Ok(())
}

fn flag_command(
    out: &Path,
    command: Vec<String>,
    seeds: Vec<u64>,
    body: impl FnOnce(&Path) -> Result<Vec<OutputFile>>,
) -> Result<()> {
    prepare_out(out)?;
    let outputs = body(out)?;
    manifest::write_manifest(out, command, seeds, &outputs)?;
    Ok(())
}

fn canon(path: &Path) -> Result<PathBuf> {
    path.canonicalize()
        .with_context(|| format!("cannot resolve path {}", path.display()))
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData(args) => {
            let cfg = args.load()?;
            let out = resolve_out(&args.out, Some(&cfg), "gen-data");
            config_command(
                &cfg,
                &out,
                vec!["gen-data".into(), "--config".into(), CONFIG_PLACEHOLDER.into()],
                vec![cfg.dataset.seed],
                commands::gen_data,
            )
        }
        Cmd::Train(args) => {
            let cfg = args.load()?;
            let out = resolve_out(&args.out, Some(&cfg), "train");
            config_command(
                &cfg,
                &out,
                vec!["train".into(), "--config".into(), CONFIG_PLACEHOLDER.into()],
                vec![cfg.seed],
                commands::train,
            )
        }
        Cmd::Finetune { config, checkpoint, extra_epochs, strategy } => {
            let cfg = config.load()?;
            let strategy: CouplingStrategy =
                commands::parse_strategy(&strategy).map_err(usage)?;
            let ckpt = canon(&checkpoint)?;
            let out = resolve_out(&config.out, Some(&cfg), "finetune");
            config_command(
                &cfg,
                &out,
                vec![
                    "finetune".into(),
                    "--config".into(),
                    CONFIG_PLACEHOLDER.into(),
                    "--checkpoint".into(),
                    ckpt.to_string_lossy().into_owned(),
                    "--extra-epochs".into(),
                    extra_epochs.to_string(),
                    "--strategy".into(),
                    strategy.to_string(),
                ],
                vec![cfg.seed],
                |cfg, out| commands::finetune(cfg, out, &ckpt, extra_epochs, strategy),
            )
        }
        Cmd::Sample { config, checkpoint } => {
            let cfg = config.load()?;
            let ckpt = canon(&checkpoint)?;
            let out = resolve_out(&config.out, Some(&cfg), "sample");
            config_command(
                &cfg,
                &out,
                vec![
                    "sample".into(),
                    "--config".into(),
                    CONFIG_PLACEHOLDER.into(),
                    "--checkpoint".into(),
                    ckpt.to_string_lossy().into_owned(),
                ],
                vec![cfg.seed],
                |cfg, out| commands::sample(cfg, out, &ckpt),
            )
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = config.load()?;
            let ckpt = canon(&checkpoint)?;
            let out = resolve_out(&config.out, Some(&cfg), "eval");
            config_command(
                &cfg,
                &out,
                vec![
                    "eval".into(),
                    "--config".into(),
                    CONFIG_PLACEHOLDER.into(),
                    "--checkpoint".into(),
                    ckpt.to_string_lossy().into_owned(),
                ],
                vec![cfg.seed],
                |cfg, out| commands::eval(cfg, out, &ckpt),
            )
        }
        Cmd::ScheduleDump { steps, ratio, checkpoint, seed, out } => {
            let ckpt = checkpoint.map(|c| canon(&c)).transpose()?;
            let out = resolve_out(&out, None, "schedule-dump");
            let mut command = vec![
                "schedule-dump".into(),
                "--steps".into(),
                steps.to_string(),
                "--ratio".into(),
                ratio.to_string(),
                "--seed".into(),
                seed.to_string(),
            ];
            if let Some(c) = &ckpt {
                command.push("--checkpoint".into());
                command.push(c.to_string_lossy().into_owned());
            }
            flag_command(&out, command, vec![seed], |out| {
                commands::schedule_dump(out, steps, ratio, ckpt.as_deref(), seed)
            })
        }
        Cmd::CoupleBench { sizes, seed, out } => {
            let parsed = commands::parse_usize_list(&sizes).map_err(usage)?;
            let out = resolve_out(&out, None, "couple-bench");
            let command = vec![
                "couple-bench".into(),
                "--sizes".into(),
                sizes.clone(),
                "--seed".into(),
                seed.to_string(),
            ];
            flag_command(&out, command, vec![seed], |out| {
                commands::couple_bench(out, &parsed, seed)
            })
        }
        Cmd::ProbeGradNoise { config, checkpoint, n_batches } => {
            let cfg = config.load()?;
            let ckpt = canon(&checkpoint)?;
            let out = resolve_out(&config.out, Some(&cfg), "probe-grad-noise");
            config_command(
                &cfg,
                &out,
                vec![
                    "probe-grad-noise".into(),
                    "--config".into(),
                    CONFIG_PLACEHOLDER.into(),
                    "--checkpoint".into(),
                    ckpt.to_string_lossy().into_owned(),
                    "--n-batches".into(),
                    n_batches.to_string(),
                ],
                vec![cfg.seed],
                |cfg, out| commands::probe_grad_noise(cfg, out, &ckpt, n_batches),
            )
        }
        Cmd::Repro { target, config, steps_list } => {
            let cfg = config.load()?;
            let budgets = commands::parse_usize_list(&steps_list).map_err(usage)?;
            let name = match target {
                ReproTarget::Fig2a => "fig2a",
                ReproTarget::FidVsSteps => "fid-vs-steps",
                ReproTarget::Finetune => "finetune",
            };
            let out = resolve_out(&config.out, Some(&cfg), &format!("repro-{name}"));
            let command = vec![
                "repro".into(),
                name.into(),
                "--config".into(),
                CONFIG_PLACEHOLDER.into(),
                "--steps".into(),
                steps_list.clone(),
            ];
            let seeds = cfg.seeds.clone();
            config_command(&cfg, &out, command, seeds, |cfg, out| match target {
                ReproTarget::Fig2a => commands::repro_fig2a(cfg, out),
                ReproTarget::FidVsSteps => commands::repro_fid_vs_steps(cfg, out, &budgets),
                ReproTarget::Finetune => commands::repro_finetune(cfg, out),
            })
        }
        Cmd::VerifyRun { run_dir } => verify_run(&run_dir),
    }
}

/// Replay a run directory's manifest into a scratch directory and compare
/// every non-volatile output digest.
pub fn verify_run(run_dir: &Path) -> Result<()> {
    let run_dir = canon(run_dir).map_err(usage)?;
    let manifest = manifest::load_manifest(&run_dir).map_err(usage)?;
    let scratch = tempdir_in_target()?;
    let argv = manifest::replay_argv(&manifest, &run_dir, &scratch)?;

    let mut full = vec!["cosflow".to_string()];
    full.extend(argv);
    let cli = Cli::try_parse_from(&full)
        .map_err(|e| usage(anyhow!("stored command does not parse: {e}")))?;
    execute(cli)?;

    let mismatched = manifest::compare_outputs(&manifest, &scratch)?;
    let checked = manifest.files.len();
    std::fs::remove_dir_all(&scratch).ok();
    if mismatched.is_empty() {
        println!(
            "verified: {checked} files reproduce byte-identically ({} volatile skipped)",
            manifest.volatile.len()
        );
        Ok(())
    } else {
        bail!("outputs differ from manifest: {}", mismatched.join(", "))
    }
}

fn tempdir_in_target() -> Result<PathBuf> {
    let base = std::env::temp_dir().join(format!(
        "cosflow-verify-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&base)?;
    Ok(base)
}

/// Exit status for an error: 2 for usage/config errors, 1 otherwise.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if err.chain().any(|c| c.is::<UsageError>()) {
        2
    } else {
        1
    }
}
