use std::path::PathBuf;

use crate::checkpoint::CheckpointError;
use crate::config::ConfigError;
use crate::csv_io::CsvError;

/// Failure of a CLI command, carrying its exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] CsvError),
    #[error("data: {0}")]
    DataShape(casa_core::Error),
    #[error("{0}")]
    Divergence(casa_core::Error),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    InsufficientPoints(String),
    #[error("gradient check failed: `{param}` has relative error {rel_err:e}")]
    GradcheckFailed { param: String, rel_err: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(casa_core::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 config/usage, 3 data, 4 divergence, 5 shape/config mismatch,
    /// 6 too few benchmark points, 7 gradient check failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Data(_) | CliError::DataShape(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Mismatch(_) => 5,
            CliError::Checkpoint(e) if e.is_mismatch() => 5,
            CliError::Checkpoint(_) => 1,
            CliError::InsufficientPoints(_) => 6,
            CliError::GradcheckFailed { .. } => 7,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }
}

impl From<casa_core::Error> for CliError {
    fn from(e: casa_core::Error) -> Self {
        use casa_core::Error as E;
        match e {
            E::DivergenceDetected { .. } | E::NonFiniteGradient { .. } => CliError::Divergence(e),
            E::InsufficientData(_) => CliError::DataShape(e),
            E::ConfigMismatch { .. } | E::ShapeMismatch { .. } | E::StateMismatch { .. } => {
                CliError::Mismatch(e.to_string())
            }
            E::InvalidConfig(msg) => CliError::Config(ConfigError::Invalid(msg)),
            E::InvalidKernel(k) => CliError::Config(ConfigError::Invalid(format!(
                "kernel size must be odd, got {k}"
            ))),
            other => CliError::Core(other),
        }
    }
}
