//! Experiment plumbing: configuration, training, evaluation, checkpoints
//! and dataset ingestion.

mod baseline;
mod bike;
mod config;
mod evaluate;
mod gradcheck;
mod model;
mod optim;
mod train;

pub use baseline::{one_step_rmse, LinearBaseline};
pub use bike::{ingest_bike_csv, BikeLayout, BikeRules, IngestReport};
pub use config::{ExperimentConfig, Inference, MetricConfig, ModelFamily, OptimizerConfig};
pub use evaluate::{evaluate, EvalCell, EvalGrid, EvalTable};
pub use gradcheck::{check_gradient, GradCheckConfig, GradCheckReport};
pub use model::{Checkpoint, ModelParams, CHECKPOINT_VERSION};
pub use optim::Adam;
pub use train::{train, MetricsRow, TrainSummary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("non-finite gradient at step {step} in {block} parameter {index}")]
    NonFiniteGradient { step: usize, block: &'static str, index: usize },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("model does not match data: {0}")]
    Mismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("ingestion produced no data: {0}")]
    Empty(String),
    #[error(transparent)]
    Model(#[from] crate::ssm::SsmError),
    #[error(transparent)]
    Filter(#[from] crate::smc::FilterError),
    #[error(transparent)]
    Grad(#[from] crate::hsmc::GradError),
}

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn json(path: &std::path::Path, source: serde_json::Error) -> Self {
        HarnessError::Json {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Io { .. } => "io",
            HarnessError::Json { .. } => "json",
            HarnessError::NonFiniteGradient { .. } => "non_finite_gradient",
            HarnessError::CheckpointVersion { .. } => "checkpoint_version",
            HarnessError::Mismatch(_) => "mismatch",
            HarnessError::Csv(_) => "csv",
            HarnessError::Empty(_) => "empty",
            HarnessError::Model(_) => "model",
            HarnessError::Filter(_) => "filter",
            HarnessError::Grad(_) => "gradient",
        }
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::json(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::json(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes an evaluation table as pretty JSON.
pub fn write_table(path: &std::path::Path, table: &EvalTable) -> Result<(), HarnessError> {
    write_json(path, table)
}
