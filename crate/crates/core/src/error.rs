use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum FedError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    Dimension {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("numerical failure in round {round}: {detail}")]
    NonFinite { round: usize, detail: String },

    #[error("config parse error at `{path}`: {message}")]
    Parse { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

impl FedError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FedError::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FedError::Io {
            path: path.into(),
            source,
        }
    }
}
