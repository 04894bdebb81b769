use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TnetError>;

#[derive(Debug, Error)]
pub enum TnetError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value in {tensor}")]
    NonFinite { tensor: String },

    #[error("value {value} outside domain {domain} in {context}")]
    Domain {
        context: &'static str,
        domain: &'static str,
        value: f64,
    },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("overlap failure: {0}")]
    Overlap(String),

    #[error("no ground-truth oracle available: {0}")]
    NoOracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl TnetError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        TnetError::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        TnetError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TnetError::Io {
            path: path.into(),
            source,
        }
    }
}
