//! Versioned JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskhedge::claims::Claim;
use taskhedge::market_models::{
    sample_gbm_family, sample_gbm_family_stratified, sample_sv_family, Interval, ModelSpec, SvRanges, TimeGrid,
};
use taskhedge::neural::NetworkArch;
use taskhedge::rng::mix_seed;
use taskhedge::training::{TrainConfig, TrainMode};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Salts separating the seed streams derived from the experiment seed.
pub(crate) mod salt {
    pub const FAMILY: u64 = 1 << 40;
    pub const TRAIN: u64 = 2 << 40;
    pub const DATASET: u64 = 3 << 40;
    pub const EVAL: u64 = 4 << 40;
    pub const RECAL_PATHS: u64 = 5 << 40;
    pub const RECAL_EVAL: u64 = 6 << 40;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    Explicit {
        models: Vec<ModelSpec>,
    },
    /// GBM tasks with volatilities drawn uniformly from `sigma`; with
    /// `stratified` each task draws from its own equal-width sub-interval.
    GbmUniform {
        n_tasks: usize,
        sigma: Interval,
        #[serde(default)]
        mu: f64,
        #[serde(default)]
        stratified: bool,
    },
    SvSample {
        n_tasks: usize,
        #[serde(default)]
        ranges: SvRanges,
    },
}

impl FamilySpec {
    pub fn resolve(&self, seed: u64) -> Result<Vec<ModelSpec>, CliError> {
        let seed = mix_seed(seed, salt::FAMILY);
        let models = match self {
            FamilySpec::Explicit { models } => {
                if models.is_empty() {
                    return Err(CliError::Config("explicit family lists no models".into()));
                }
                for m in models {
                    m.validate()?;
                }
                models.clone()
            }
            FamilySpec::GbmUniform { n_tasks, sigma, mu, stratified: false } => {
                sample_gbm_family(*n_tasks, *sigma, *mu, seed)?
            }
            FamilySpec::GbmUniform { n_tasks, sigma, mu, stratified: true } => {
                sample_gbm_family_stratified(*n_tasks, *sigma, *mu, seed)?
            }
            FamilySpec::SvSample { n_tasks, ranges } => sample_sv_family(*n_tasks, ranges, seed)?,
        };
        Ok(models)
    }

    pub fn n_tasks(&self) -> usize {
        match self {
            FamilySpec::Explicit { models } => models.len(),
            FamilySpec::GbmUniform { n_tasks, .. } | FamilySpec::SvSample { n_tasks, .. } => *n_tasks,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_embed_dim() -> usize {
    1
}

fn default_input_scale() -> [f64; 2] {
    NetworkArch::new(1, 1, vec![]).expect("default architecture").input_scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_input_scale")]
    pub input_scale: [f64; 2],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: default_hidden(), embed_dim: default_embed_dim(), input_scale: default_input_scale() }
    }
}

impl ArchConfig {
    pub fn to_arch(&self, n_tasks: usize) -> Result<NetworkArch, CliError> {
        let arch = NetworkArch {
            n_tasks,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            input_scale: self.input_scale,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn default_eval_paths() -> usize {
    20_000
}

fn yes() -> bool {
    true
}

/// Fit of one unseen task on top of a trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecalibrationConfig {
    pub model: ModelSpec,
    /// Training paths of the new task.
    pub paths: usize,
    /// Fresh paths on which the recalibrated hedge is scored.
    #[serde(default = "default_eval_paths")]
    pub eval_paths: usize,
    /// Epoch count for the embedding-only fit; `train.epochs` when absent.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Also fit a single-task network from scratch on the same paths.
    #[serde(default = "yes")]
    pub compare_scratch: bool,
}

fn default_bins() -> usize {
    50
}

fn default_delta_tau_days() -> f64 {
    10.0
}

fn default_delta_spots() -> [f64; 2] {
    [0.8, 1.2]
}

fn default_delta_points() -> usize {
    41
}

/// Which evaluation outputs to write. Everything is off by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub pnl_stats: bool,
    #[serde(default)]
    pub variance_aggregate: bool,
    /// Add Black-Scholes benchmark rows (realized vol, shifted by -5, 0, +5 vol points).
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub histograms: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    /// Histogram range; the pooled network PnL range when absent.
    #[serde(default)]
    pub histogram_range: Option<[f64; 2]>,
    #[serde(default)]
    pub delta_slices: bool,
    #[serde(default = "default_delta_tau_days")]
    pub delta_tau_days: f64,
    #[serde(default = "default_delta_spots")]
    pub delta_spot_range: [f64; 2],
    #[serde(default = "default_delta_points")]
    pub delta_points: usize,
    #[serde(default)]
    pub embeddings: bool,
    #[serde(default)]
    pub implied_vols: bool,
    /// Score on this many freshly simulated paths per task instead of the
    /// held-out share of the training datasets.
    #[serde(default)]
    pub fresh_paths_per_task: Option<usize>,
    /// Report PnL including the premium.
    #[serde(default)]
    pub include_premium: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all evaluation fields have defaults")
    }
}

impl EvaluationConfig {
    pub fn any(&self) -> bool {
        self.pnl_stats
            || self.variance_aggregate
            || self.histograms
            || self.delta_slices
            || self.embeddings
            || self.implied_vols
    }
}

fn default_claim() -> Claim {
    Claim::short_call(1.0).expect("valid strike")
}

fn default_s0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    pub family: FamilySpec,
    pub grid: TimeGrid,
    #[serde(default = "default_claim")]
    pub claim: Claim,
    #[serde(default = "default_s0")]
    pub s0: f64,
    pub paths_per_task: usize,
    #[serde(default)]
    pub arch: ArchConfig,
    /// `train.seed` is replaced by a seed derived from `seed`.
    #[serde(default)]
    pub train: TrainConfig,
    pub output_dir: PathBuf,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recalibration: Option<RecalibrationConfig>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    /// Write a CSV copy of every dataset next to the binary file.
    #[serde(default)]
    pub export_csv: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.name.trim().is_empty() {
            return Err(CliError::Config("name must not be empty".into()));
        }
        if self.family.n_tasks() == 0 {
            return Err(CliError::Config("family must contain at least one task".into()));
        }
        if self.paths_per_task < 2 {
            return Err(CliError::Config("paths_per_task must be at least 2".into()));
        }
        if !(self.s0.is_finite() && self.s0 > 0.0) {
            return Err(CliError::Config(format!("s0 must be positive, got {}", self.s0)));
        }
        self.claim.validate()?;
        self.family.resolve(self.seed)?;
        self.arch.to_arch(self.family.n_tasks())?;
        self.train.validate()?;
        if self.train.mode != TrainMode::Full {
            return Err(CliError::Config("train.mode must be full; recalibration has its own section".into()));
        }
        if let Some(r) = &self.recalibration {
            r.model.validate()?;
            if r.paths == 0 || r.eval_paths < 2 {
                return Err(CliError::Config("recalibration needs paths >= 1 and eval_paths >= 2".into()));
            }
        }
        let e = &self.evaluation;
        if e.histogram_bins == 0 {
            return Err(CliError::Config("histogram_bins must be at least 1".into()));
        }
        if let Some([lo, hi]) = e.histogram_range {
            if !(lo < hi) {
                return Err(CliError::Config(format!("histogram_range [{lo}, {hi}] is inverted")));
            }
        }
        if !(e.delta_tau_days > 0.0) || e.delta_points < 2 || !(e.delta_spot_range[0] < e.delta_spot_range[1]) {
            return Err(CliError::Config("delta slice needs tau > 0, two points and an increasing spot range".into()));
        }
        if e.fresh_paths_per_task.is_some_and(|n| n < 2) {
            return Err(CliError::Config("fresh_paths_per_task must be at least 2".into()));
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Vec<ModelSpec>, CliError> {
        self.family.resolve(self.seed)
    }

    pub fn network_arch(&self) -> Result<NetworkArch, CliError> {
        self.arch.to_arch(self.family.n_tasks())
    }

    /// Training settings with the derived seed filled in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: mix_seed(self.seed, salt::TRAIN), ..self.train.clone() }
    }

    pub fn dataset_seed(&self, task_id: usize) -> u64 {
        mix_seed(self.seed, salt::DATASET + task_id as u64)
    }

    pub fn eval_seed(&self, task_id: usize) -> u64 {
        mix_seed(self.seed, salt::EVAL + task_id as u64)
    }
}
