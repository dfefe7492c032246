use std::path::{Path, PathBuf};

use geoflow::curriculum::TrainError;
use geoflow::evalmetrics::EvalError;
use geoflow::flowformer::ModelError;
use geoflow::flowmatch::FlowError;
use geoflow::numerics::NumericsError;
use geoflow::rollout::RolloutError;
use geoflow::toyworld::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl CliError {
    /// 2 validation, 3 numeric abort, 4 I/O or malformed file.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } | CliError::Format { .. } => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn validation(message: impl Into<String>) -> Self {
        CliError::Validation(message.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Flow(f) => f.into(),
            TrainError::Numerics(n) => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Numerics(n) | ModelError::Block { source: n, .. } => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::NonFinite { .. } | FlowError::NonFiniteLoss => CliError::Numeric(e.to_string()),
            FlowError::Numerics(n) => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<NumericsError> for CliError {
    fn from(e: NumericsError) -> Self {
        match e {
            NumericsError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<RolloutError> for CliError {
    fn from(e: RolloutError) -> Self {
        match e {
            RolloutError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            RolloutError::Model(m) => m.into(),
            RolloutError::Flow(f) => f.into(),
            RolloutError::Numerics(n) => n.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<WorldError> for CliError {
    fn from(e: WorldError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::NonFinite(_) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}
