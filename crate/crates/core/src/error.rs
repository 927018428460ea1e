use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {location}: {msg}")]
    Parse {
        path: PathBuf,
        /// "line N" for text formats, "byte N" for binary ones.
        location: String,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("node {0} has zero degree; diffusion is undefined on isolated nodes")]
    IsolatedNode(usize),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("solver did not converge: {0}")]
    NoConvergence(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("class {0} does not occur in the training labels")]
    MissingClass(usize),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        path: impl Into<PathBuf>,
        location: String,
        msg: impl Into<String>,
    ) -> Self {
        Error::Parse {
            path: path.into(),
            location,
            msg: msg.into(),
        }
    }
}
