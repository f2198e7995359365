use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FmxError {
    /// A parameter lies outside the domain of the distribution or operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {what} (expected {expected}, got {actual})")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("index out of range: {what} = {index}, limit {limit}")]
    Index {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// NaN or infinity appeared during training or evaluation.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl FmxError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FmxError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl std::fmt::Display, msg: impl Into<String>) -> Self {
        FmxError::Parse {
            path: path.to_string(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, FmxError>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(FmxError::Shape {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}
