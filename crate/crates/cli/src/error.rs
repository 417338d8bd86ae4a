use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("checkpoint not found: {}", .0.display())]
    MissingCheckpoint(PathBuf),

    /// A check ran and failed.
    #[error("{0}")]
    Verification(String),

    #[error(transparent)]
    Core(#[from] posemoe_core::Error),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for verification or training failures, 2 for usage and config errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) | CliError::MissingCheckpoint(_) => 2,
            CliError::Core(posemoe_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
