//! Experiment configuration (JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::NetworkSpec;
use crate::error::{Error, Result};
use crate::fusion::DEFAULT_REDUCTION;
use crate::inference::DEFAULT_OVERLAP;
use crate::metrics::DEFAULT_TAU_MM;
use crate::optimization::{OptimizerConfig, TrainConfig};
use crate::transfer::{StrategyKind, MULTI_LESION_TAG};
use crate::volume::synthetic::LesionFamily;

/// A task and the directory holding its native case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSource {
    pub task_id: String,
    pub data_root: PathBuf,
}

/// A family by preset name, or a fully specified one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FamilyRef {
    Preset(String),
    Custom(LesionFamily),
}

impl FamilyRef {
    pub fn resolve(&self, dims: [usize; 3]) -> Result<LesionFamily> {
        match self {
            FamilyRef::Preset(name) => LesionFamily::preset(name, dims),
            FamilyRef::Custom(f) => {
                f.validate()?;
                Ok(f.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub families: Vec<FamilyRef>,
    #[serde(default = "default_cases")]
    pub cases_per_family: usize,
    #[serde(default = "default_dims")]
    pub dims: [usize; 3],
    #[serde(default)]
    pub seed: u64,
}

fn default_cases() -> usize {
    20
}
fn default_dims() -> [usize; 3] {
    [32, 64, 64]
}

fn default_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        ..TrainConfig::default()
    }
}

fn default_pretrain() -> TrainConfig {
    default_train(200)
}
fn default_transfer() -> TrainConfig {
    default_train(200)
}
fn default_reduction() -> usize {
    DEFAULT_REDUCTION
}
fn default_overlap() -> f64 {
    DEFAULT_OVERLAP
}
fn default_tau() -> f64 {
    DEFAULT_TAU_MM
}
fn default_folds() -> usize {
    5
}
fn default_train_fraction() -> f64 {
    0.2
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_strategies() -> Vec<StrategyKind> {
    StrategyKind::ALL.to_vec()
}
fn default_matrix_sources() -> Vec<String> {
    vec![MULTI_LESION_TAG.to_string()]
}
fn default_true() -> bool {
    true
}
fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything one experiment needs. Each training phase's schedule horizon
/// (`epoch_max`) is that phase's epoch count; `optimizer.epoch_max` is
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub spec: NetworkSpec,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_pretrain")]
    pub pretrain: TrainConfig,
    #[serde(default = "default_transfer")]
    pub transfer: TrainConfig,
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
    #[serde(default = "default_overlap")]
    pub overlap: f64,
    #[serde(default = "default_tau")]
    pub tau_mm: f64,
    #[serde(default)]
    pub sources: Vec<TaskSource>,
    #[serde(default)]
    pub target: Option<TaskSource>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<StrategyKind>,
    /// Checkpoint tags used as transfer sources in the matrix.
    #[serde(default = "default_matrix_sources")]
    pub matrix_sources: Vec<String>,
    /// Folds run by the matrix; all folds when absent.
    #[serde(default)]
    pub matrix_folds: Option<Vec<usize>>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    /// Record epoch times in the report. Only meaningful when cells run
    /// alone on the machine.
    #[serde(default = "default_true")]
    pub exclusive_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.optimizer.validate()?;
        for phase in [&self.pretrain, &self.transfer] {
            phase.validate()?;
            self.spec.check_patch(phase.patch)?;
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.tau_mm >= 0.0) {
            return Err(Error::Config("tau_mm must be non-negative".into()));
        }
        if let Some(folds) = &self.matrix_folds {
            if let Some(f) = folds.iter().find(|&&f| f >= self.folds) {
                return Err(Error::Config(format!("matrix fold {f} out of range for {} folds", self.folds)));
            }
        }
        let mut ids: Vec<&str> = self.sources.iter().map(|s| s.task_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate source task ids".into()));
        }
        if ids.contains(&MULTI_LESION_TAG) {
            return Err(Error::Config(format!("{MULTI_LESION_TAG} is reserved for the pooled checkpoint")));
        }
        Ok(())
    }

    /// Optimizer settings for a phase of `epochs` epochs.
    pub fn phase_optimizer(&self, epochs: usize) -> OptimizerConfig {
        OptimizerConfig {
            epoch_max: epochs.max(1),
            ..self.optimizer.clone()
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.checkpoint_dir().join(format!("{tag}.lsgckpt"))
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.output_dir.join("runs")
    }

    pub fn target(&self) -> Result<&TaskSource> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::Config("no target task configured".into()))
    }
}
