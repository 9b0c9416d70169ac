use std::path::{Path, PathBuf};

use taugen_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const STRICT_FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const DIVERGED: i32 = 4;
    pub const CONDITIONING: i32 = 5;
    pub const FINGERPRINT: i32 = 6;
}

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("png: {0}")]
    Png(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("corpus fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("thresholds not met: {0}")]
    Strict(String),
}

impl AppError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        AppError::Io { path: path.to_path_buf(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        AppError::Json { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Core(e) => match e {
                Error::NonFiniteLoss { .. } => exit::DIVERGED,
                Error::ConditioningMismatch(_) => exit::CONDITIONING,
                Error::CorpusMismatch(_) => exit::FINGERPRINT,
                _ => exit::CONFIG,
            },
            AppError::Io { .. } => exit::IO,
            AppError::Json { .. } | AppError::Config(_) | AppError::Png(_) | AppError::Checkpoint(_) => exit::CONFIG,
            AppError::Fingerprint(_) => exit::FINGERPRINT,
            AppError::Strict(_) => exit::STRICT_FAILURE,
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
