use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the pose pipeline.
#[derive(Debug, Error)]
pub enum CfaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in record {index}, field `{field}`: {message}")]
    Parse {
        index: usize,
        field: String,
        message: String,
    },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss = {loss}")]
    Divergence {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CfaError>;

impl CfaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CfaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        CfaError::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CfaError::Domain(msg.into())
    }
}
