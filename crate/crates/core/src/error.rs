use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GpError>;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("matrix is not positive definite after jitter escalation (tried {jitters:?})")]
    NotPositiveDefinite { jitters: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GpError {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        GpError::Input(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GpError::Io {
            path: path.into(),
            source,
        }
    }
}
