use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("gradient tape misuse: {0}")]
    Tape(String),

    #[error("training diverged: non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("command error: {0}")]
    Command(String),

    #[error("lanelet command inference failed: {0}")]
    Inference(String),

    #[error("feature extraction failed: {0}")]
    Feature(String),

    #[error("pooling failed: {0}")]
    Pooling(String),

    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("report error for method `{method}`: {reason}")]
    Report { method: String, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
