use std::path::PathBuf;

use thiserror::Error;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt PNG: {0}")]
    CorruptPng(String),

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("bounding box {0:?} has zero area after clamping")]
    EmptyBox((i64, i64, i64, i64)),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no pairs")]
    NoPairs,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{stage} backend failed: {source}")]
    Backend {
        stage: String,
        #[source]
        source: BackendError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn backend(stage: impl Into<String>, source: BackendError) -> Self {
        Error::Backend {
            stage: stage.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 for data errors, 3 for backend errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend { .. } => 3,
            Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}
