use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PofError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PofError {
    #[error("domain error in {function}: argument {value} is outside the supported domain")]
    Domain { function: &'static str, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("infeasible point: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PofError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PofError::Io {
            path: path.into(),
            source,
        }
    }
}
