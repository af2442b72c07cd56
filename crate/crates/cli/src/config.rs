//! Experiment configuration: one TOML file, flag overrides win, unknown
//! keys rejected, and the fully resolved copy is written next to the
//! outputs of every run.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cosflow_core::datasets::DatasetSpec;
use cosflow_core::interpolant::ScoreSign;
use cosflow_core::model::DEFAULT_TIME_FEATURES;
use cosflow_core::sampler::{AdaptiveConfig, CosineMode, OdeSchedule, TimeSchedule};
use cosflow_core::trainer::{CouplingStrategy, OptimHyper, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub widths: Vec<usize>,
    pub time_features: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { widths: vec![64, 64, 64], time_features: DEFAULT_TIME_FEATURES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub epochs: u64,
    pub batch_size: usize,
    pub strategy: CouplingStrategy,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub record_timing: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let o = OptimHyper::default();
        Self {
            epochs: 10,
            batch_size: 128,
            strategy: CouplingStrategy::Independent,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ode,
    Sde,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Uniform,
    SnrShift,
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub kind: SamplerKind,
    pub schedule: ScheduleKind,
    pub steps: usize,
    /// SNR shift ratio.
    pub ratio: f64,
    /// Adaptive bounds; zero means "derive from the step budget".
    pub dt_min: f64,
    pub dt_max: f64,
    pub gain: f64,
    pub invert_gate: bool,
    pub mode: CosineMode,
    pub n_samples: usize,
    pub score_sign: ScoreSign,
    pub diffusion_scale: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ode,
            schedule: ScheduleKind::Uniform,
            steps: 50,
            ratio: 3.0,
            dt_min: 0.0,
            dt_max: 0.0,
            gain: 10.0,
            invert_gate: false,
            mode: CosineMode::BatchMean,
            n_samples: 2048,
            score_sign: ScoreSign::Derived,
            diffusion_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// Projections for sliced Wasserstein.
    pub n_proj: usize,
    /// Reference batch size drawn from the dataset family.
    pub n_reference: usize,
    /// Seed offset for the reference draw so it never reuses training data.
    pub reference_seed: u64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { n_proj: 64, n_reference: 2048, reference_seed: 9001 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub sampler: SamplerSection,
    pub metrics: MetricsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: default_out_root().join("run"),
            dataset: DatasetSpec::default(),
            model: ModelSection::default(),
            trainer: TrainerSection::default(),
            sampler: SamplerSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

/// Root for relative output directories; overridable through the
/// environment.
pub fn default_out_root() -> PathBuf {
    std::env::var_os("COSFLOW_OUT_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

impl ExperimentConfig {
    /// Parse a TOML file, apply `key.path=value` overrides (flags win),
    /// validate, and return the resolved config.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            text.parse().context("config is not valid TOML")?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .context("config has unknown or ill-typed keys")?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.to_train_config(self.seed).validate()?;
        if self.sampler.steps == 0 {
            bail!("sampler.steps must be at least 1");
        }
        if !(self.sampler.ratio > 0.0) {
            bail!("sampler.ratio must be positive");
        }
        if self.sampler.n_samples == 0 {
            bail!("sampler.n_samples must be at least 1");
        }
        if !(self.sampler.diffusion_scale >= 0.0) {
            bail!("sampler.diffusion_scale must be nonnegative");
        }
        if self.sampler.schedule == ScheduleKind::Adaptive {
            self.adaptive_config()?;
            if self.sampler.kind == SamplerKind::Sde {
                bail!("the adaptive schedule drives the deterministic sampler only");
            }
        }
        if self.metrics.n_proj == 0 || self.metrics.n_reference == 0 {
            bail!("metrics.n_proj and metrics.n_reference must be at least 1");
        }
        if self.seeds.is_empty() {
            bail!("seeds must be nonempty");
        }
        Ok(())
    }

    pub fn to_train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            dataset: self.dataset.clone(),
            epochs: self.trainer.epochs,
            batch_size: self.trainer.batch_size,
            strategy: self.trainer.strategy,
            seed,
            optim: OptimHyper {
                lr: self.trainer.lr,
                beta1: self.trainer.beta1,
                beta2: self.trainer.beta2,
                eps: self.trainer.eps,
                weight_decay: self.trainer.weight_decay,
            },
            widths: self.model.widths.clone(),
            time_features: self.model.time_features,
            record_timing: self.trainer.record_timing,
        }
    }

    pub fn adaptive_config(&self) -> Result<AdaptiveConfig> {
        let s = &self.sampler;
        let base = AdaptiveConfig::for_budget(s.steps)?;
        let dt_min = if s.dt_min > 0.0 { s.dt_min } else { base.dt_min };
        let dt_max = if s.dt_max > 0.0 { s.dt_max } else { base.dt_max };
        Ok(AdaptiveConfig::checked(dt_min, dt_max, s.gain, s.invert_gate, s.mode)?)
    }

    pub fn ode_schedule(&self) -> Result<OdeSchedule> {
        Ok(match self.sampler.schedule {
            ScheduleKind::Uniform => {
                OdeSchedule::Fixed(cosflow_core::sampler::uniform_schedule(self.sampler.steps)?)
            }
            ScheduleKind::SnrShift => OdeSchedule::Fixed(
                cosflow_core::sampler::snr_shift_schedule(self.sampler.steps, self.sampler.ratio)?,
            ),
            ScheduleKind::Adaptive => OdeSchedule::Adaptive(self.adaptive_config()?),
        })
    }

    pub fn fixed_schedule(&self) -> Result<TimeSchedule> {
        Ok(match self.sampler.schedule {
            ScheduleKind::Uniform => cosflow_core::sampler::uniform_schedule(self.sampler.steps)?,
            ScheduleKind::SnrShift => {
                cosflow_core::sampler::snr_shift_schedule(self.sampler.steps, self.sampler.ratio)?
            }
            ScheduleKind::Adaptive => bail!("the stochastic sampler needs a fixed schedule"),
        })
    }

    pub fn to_resolved_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Apply one `dotted.path=value` override onto the parsed TOML tree.
fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let Some((path, value)) = raw.split_once('=') else {
        bail!("override '{raw}' is not of the form key.path=value");
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override '{raw}' has an empty path segment");
    }
    // Parse the value as TOML; fall back to a bare string.
    let parsed: toml::Value = format!("v = {}", value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));

    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override '{raw}' descends through a non-table key"))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parsed);
    Ok(())
}
