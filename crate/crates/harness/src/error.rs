use std::path::PathBuf;

use thiserror::Error;

use crate::checkpoint::CheckpointError;

/// Harness failures, grouped by the process exit code they map to.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Core(#[from] recttt_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Numerical(_) => EXIT_NUMERICAL,
            HarnessError::Io { .. } | HarnessError::Checkpoint(_) => EXIT_IO,
            HarnessError::Core(recttt_core::Error::NonFinite(_)) => EXIT_NUMERICAL,
            HarnessError::Core(_) => EXIT_CONFIG,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }
}
