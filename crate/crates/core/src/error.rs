use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::data::BagError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Bag(#[from] BagError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{0}")]
    Stats(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("model parameters are untrained")]
    Untrained,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Divergence, and non-finite values surfacing from the engine.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence(_) | Error::Autodiff(AutodiffError::NonFinite { .. }))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
