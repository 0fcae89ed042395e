use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AppError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Core(#[from] contactfit_core::Error),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("image: {0}")]
    Image(String),
    #[error("request failed after {attempts} attempt(s): {detail}")]
    Network { attempts: u32, detail: String },
    #[error("no cached responses for key {key} ({detail})")]
    CacheMiss { key: String, detail: String },
    #[error("optimization diverged in stage {stage} at step {step}")]
    Diverged { stage: usize, step: usize },
}

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for bad input, 3 when responses could not be
    /// obtained, 4 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Network { .. } | Self::CacheMiss { .. } => 3,
            Self::Diverged { .. } => 4,
            _ => 2,
        }
    }
}
