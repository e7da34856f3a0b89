use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cell ({row}, {col}) is outside the {n_rows}x{n_cols} grid")]
    OutOfBounds {
        row: i64,
        col: i64,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("raster does not cover the grid extent: {0}")]
    Extent(String),

    #[error("feature undefined for cell ({row}, {col}): {reason}")]
    FeatureUndefined { row: usize, col: usize, reason: String },

    #[error("no record for cell ({row}, {col})")]
    MissingCell { row: usize, col: usize },

    #[error("cannot balance classes: {0}")]
    Balancing(String),

    #[error("empty confusion matrix")]
    EmptyConfusion,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
