use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Divergence diagnostics captured at the moment training produced a
/// non-finite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceSnapshot {
    pub epoch: usize,
    pub iteration: usize,
    pub lr: f64,
    pub loss: f64,
    pub last_finite_loss: Option<f64>,
    pub max_abs_param: f64,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid container {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid spacing {0:?}: every component must be positive")]
    Spacing([f64; 3]),
    #[error("degenerate intensity statistics: {0}")]
    DegenerateStats(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {num_classes} classes")]
    LabelRange { label: u8, num_classes: usize },
    #[error("network spec mismatch: {0}")]
    SpecMismatch(String),
    #[error("gradient supplied for frozen parameter {0}")]
    FrozenGradient(String),
    #[error("epoch {epoch} outside schedule range [0, {epoch_max}]")]
    EpochRange { epoch: usize, epoch_max: usize },
    #[error("training diverged at epoch {} iteration {}: loss {}", .0.epoch, .0.iteration, .0.loss)]
    Divergence(Box<DivergenceSnapshot>),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("metric undefined for every case: {0}")]
    AllUndefined(String),
}

/// Coarse error classes used by the command-line frontend for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Divergence,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_)
            | Error::SpecMismatch(_)
            | Error::MissingCheckpoint(_)
            | Error::EpochRange { .. }
            | Error::FrozenGradient(_) => ErrorClass::Config,
            Error::Divergence(_) => ErrorClass::Divergence,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::Shape(_)
            | Error::Spacing(_)
            | Error::DegenerateStats(_)
            | Error::LabelRange { .. }
            | Error::AllUndefined(_) => ErrorClass::Data,
        }
    }
}
