//! Command implementations behind the `gem2` binary.

pub mod args;
mod cache;
mod commands;

use gem2::bench::BenchError;
use gem2::featurizer::FeatureError;
use gem2::model::ModelError;
use gem2::tensor::TensorError;
use gem2::trainer::TrainError;
use thiserror::Error;

pub use cache::{featurize_to_dir, Manifest, ManifestEntry, SkippedLine, MANIFEST_FILE};
pub use commands::{load_records, run, EvalOutput, InspectOutput, RunConfig};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CONFIG_MISMATCH: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    ConfigMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::ConfigMismatch(_) => EXIT_CONFIG_MISMATCH,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Input(format!("{}: {e}", path.display()))
    }
}

impl From<FeatureError> for CliError {
    fn from(e: FeatureError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::ConfigMismatch(_) => CliError::ConfigMismatch(e.to_string()),
            ModelError::Tensor(TensorError::NonFinite { .. }) => CliError::Numeric(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Divergence { .. } | TrainError::NonFiniteGradient { .. } => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}
