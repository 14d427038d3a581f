//! TOML experiment configuration.
//!
//! Precedence, lowest first: built-in defaults, the config file, command-line
//! flags. The resolved configuration is written next to every output.

use crate::denoisers::{AnalyticDenoiser, Checkpoint, DenoiserModel, PerturbationSpec};
use crate::error::{Error, Result};
use crate::samplers::{Method, SamplerConfig};
use crate::schedule::{select_time_grid, GridMode, NoiseSchedule, ScheduleKind, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::timeshift::ShiftConfig;
use crate::training::{DatasetSpec, OptimizerKind, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// A baseline method, optionally wrapped in the time-shift sampler (`ts-` prefix).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerChoice {
    pub method: Method,
    pub time_shift: bool,
}

impl std::str::FromStr for SamplerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.strip_prefix("ts-") {
            Some(base) => Ok(Self { method: base.parse()?, time_shift: true }),
            None => Ok(Self { method: s.parse()?, time_shift: false }),
        }
    }
}

impl std::fmt::Display for SamplerChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.time_shift {
            f.write_str("ts-")?;
        }
        f.write_str(self.method.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self { kind: ScheduleKind::Linear, steps: DEFAULT_STEPS, beta_start: DEFAULT_BETA_START, beta_end: DEFAULT_BETA_END }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Trained checkpoint; the analytic denoiser of the dataset is used when absent.
    pub checkpoint: Option<PathBuf>,
    /// Injected per-step state error φ.
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    /// `ddpm`, `ddim`, `s-pndm`, `f-pndm`, or any of them prefixed with `ts-`.
    pub method: String,
    pub steps: usize,
    pub grid: GridMode,
    pub eta: f64,
    /// Number of chains.
    pub n: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { method: "ddim".into(), steps: 10, grid: GridMode::Uniform, eta: 0.0, n: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub hidden: Vec<usize>,
    pub time_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, optimizer: t.optimizer, hidden: vec![128; 3], time_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseSection {
    pub timesteps: Vec<usize>,
    /// Stage split of the MSE diagnostic; 0.65·T when absent.
    pub t_split: Option<usize>,
    pub offset_lo: i64,
    pub offset_hi: i64,
    pub batch_mean: bool,
    /// Use backward-sampler states instead of forward ones for the variance density.
    pub backward: bool,
}

impl Default for DiagnoseSection {
    fn default() -> Self {
        Self { timesteps: (0..10).map(|i| i * 100).collect(), t_split: None, offset_lo: -6, offset_hi: 4, batch_mean: false, backward: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub trials: usize,
    pub dim: usize,
    pub timesteps: Vec<usize>,
    pub err_norms: Vec<f64>,
    pub window: usize,
    pub order_steps: Vec<usize>,
    pub chains: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        let t = crate::theory::TheoremExperiment::default();
        Self {
            trials: t.trials,
            dim: t.d,
            timesteps: t.timesteps,
            err_norms: t.err_norms,
            window: t.window,
            order_steps: vec![10, 20, 40, 80],
            chains: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// `start:end:step`, inclusive.
    pub window: String,
    pub cutoff: String,
    pub n_proj: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { window: "10:60:10".into(), cutoff: "0:500:100".into(), n_proj: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every random stream derives from it.
    pub seed: u64,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    /// Window and cutoff of the time-shift sampler; the preset for the step count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftConfig>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub diagnose: DiagnoseSection,
    #[serde(default)]
    pub verify: VerifySection,
    #[serde(default)]
    pub sweep: SweepSection,
}

fn default_dataset() -> DatasetSpec {
    DatasetSpec::Gaussian { mean: vec![0.0; 2], variance: 1.0, size: 1000 }
}

/// Sets `path` (dot-separated) inside a TOML table, creating intermediate tables.
pub fn set_override(root: &mut toml::Table, path: &str, value: toml::Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut table = root;
    for p in parts {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::Table::new());
        }
        table = entry.as_table_mut().expect("table");
    }
    table.insert(last.to_string(), value);
}

impl ExperimentConfig {
    /// Parses a file and applies overrides; relative paths are resolved against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let (mut table, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                (table, p.parent().map(Path::to_path_buf))
            }
            None => (toml::Table::new(), None),
        };
        for (k, v) in overrides {
            set_override(&mut table, k, v.clone());
        }
        if !table.contains_key("seed") {
            return Err(Error::Config("a seed is required (config `seed` or --seed)".into()));
        }
        let mut cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let (Some(ck), Some(base)) = (cfg.model.checkpoint.as_mut(), base) {
            if ck.is_relative() && !base.as_os_str().is_empty() {
                *ck = base.join(&*ck);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(ck) = &self.model.checkpoint {
            if !ck.is_file() {
                return Err(Error::Config(format!("checkpoint {} not found", ck.display())));
            }
        }
        self.sampler_choice()?;
        if !(self.model.phi >= 0.0 && self.model.phi.is_finite()) {
            return Err(Error::Config(format!("phi = {} must be >= 0", self.model.phi)));
        }
        if self.dataset.size() == 0 {
            return Err(Error::Config("dataset size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::build(s.kind, s.steps, s.beta_start, s.beta_end)
    }

    pub fn sampler_choice(&self) -> Result<SamplerChoice> {
        self.sampler.method.parse()
    }

    pub fn sampler_config(&self, schedule: &NoiseSchedule) -> Result<SamplerConfig> {
        let grid = select_time_grid(schedule, self.sampler.steps, self.sampler.grid)?;
        let mut cfg = SamplerConfig::new(self.sampler_choice()?.method, grid, self.sampler.n, self.seed);
        cfg.eta = self.sampler.eta;
        Ok(cfg)
    }

    pub fn shift_config(&self) -> Result<ShiftConfig> {
        self.shift.or_else(|| ShiftConfig::preset(self.sampler.steps)).ok_or_else(|| {
            Error::Config(format!("no shift preset for {} steps; set [shift] window and cutoff", self.sampler.steps))
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig { epochs: t.epochs, batch_size: t.batch_size, learning_rate: t.learning_rate, optimizer: t.optimizer, seed: self.seed }
    }

    /// The configured denoiser, wrapped with error injection when φ > 0.
    pub fn model(&self, schedule: &NoiseSchedule) -> Result<DenoiserModel> {
        let model = match &self.model.checkpoint {
            Some(path) => Checkpoint::load(path)?.to_model(schedule)?,
            None => {
                let mix = self.dataset.mixture()?.ok_or_else(|| {
                    Error::Config("the analytic denoiser needs a gaussian or gmm dataset; pass a checkpoint".into())
                })?;
                DenoiserModel::Analytic(AnalyticDenoiser::new(mix, schedule.clone()))
            }
        };
        if self.model.phi > 0.0 {
            let spec = PerturbationSpec::constant(schedule.len(), self.model.phi, self.seed);
            return model.perturbed(spec);
        }
        Ok(model)
    }
}

/// Parses `start:end:step` into the inclusive arithmetic sequence.
pub fn parse_range(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::Config(format!("range '{s}' must be start:end:step"));
    let nums: Vec<usize> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
    match nums[..] {
        [v] => Ok(vec![v]),
        [start, end, step] if step > 0 && start <= end => Ok((start..=end).step_by(step).collect()),
        _ => Err(bad()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges() {
        assert_eq!(parse_range("10:60:10").unwrap(), vec![10, 20, 30, 40, 50, 60]);
        assert_eq!(parse_range("0:500:100").unwrap().len(), 6);
        assert_eq!(parse_range("7").unwrap(), vec![7]);
        assert!(parse_range("5:1:1").is_err());
        assert!(parse_range("0:10:0").is_err());
    }

    #[test]
    fn seed_is_mandatory() {
        assert!(matches!(ExperimentConfig::load(None, &[]), Err(Error::Config(_))));
        let cfg = ExperimentConfig::load(None, &[("seed".into(), toml::Value::Integer(3))]).unwrap();
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn resolved_config_round_trips() {
        let overrides = vec![
            ("seed".to_string(), toml::Value::Integer(9)),
            ("sampler.method".to_string(), toml::Value::String("ts-f-pndm".into())),
        ];
        let cfg = ExperimentConfig::load(None, &overrides).unwrap();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.sampler_choice().unwrap(), SamplerChoice { method: Method::FPndm, time_shift: true });
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 1\n[sampler]\nmethood = \"ddim\"\n").unwrap();
        assert!(matches!(ExperimentConfig::load(Some(&p), &[]), Err(Error::Config(_))));
    }
}
