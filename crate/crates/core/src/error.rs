use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("failed to load {path}: {field}: {message}")]
    Load {
        path: PathBuf,
        field: &'static str,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: &'static str, message: String },

    #[error("mandible not found: {0}")]
    MandibleNotFound(String),

    #[error("no seed: {0}")]
    NoSeed(String),

    #[error("{0}")]
    Delineation(String),

    #[error("input too large for exhaustive search: {voxels} voxels (limit {limit})")]
    TooLarge { voxels: usize, limit: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
