use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::ConfigError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("check failed:\n{0}")]
    CheckFailed(String),

    #[error("some runs failed:\n{0}")]
    RunsFailed(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Core(#[from] pmr_core::Error),
}

impl LabError {
    /// 0 success, 2 usage or config, 3 integrity, 4 failed check, 1 anything
    /// else.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) | LabError::Config(_) => 2,
            LabError::Integrity(_) => 3,
            LabError::CheckFailed(_) => 4,
            LabError::RunsFailed(_)
            | LabError::Io { .. }
            | LabError::Format { .. }
            | LabError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
        move |source| LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> LabError {
        LabError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;
