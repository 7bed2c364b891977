use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the edge-detection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("file contains no points")]
    EmptyFile,

    #[error("non-finite coordinate at line {line}")]
    NonFinite { line: usize },

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("insufficient neighbors: requested k={k} but cloud has {n} points")]
    InsufficientNeighbors { k: usize, n: usize },

    #[error("normal undefined at point {index}: degenerate neighborhood")]
    UndefinedNormal { index: usize },

    #[error("operation requires normals")]
    NormalsRequired,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    DegenerateBatch(usize),

    #[error("target {target} out of range for {classes} classes")]
    InvalidTarget { target: usize, classes: usize },

    #[error("cannot balance samples: only one class present")]
    Unbalanceable,

    #[error("vertex index {index} out of range for mesh with {n_vertices} vertices")]
    InconsistentPairing { index: usize, n_vertices: usize },

    #[error("YAML error at line {line}, column {column}: {message}")]
    Yaml {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("point set is empty")]
    EmptySet,

    #[error("confusion counts are all zero")]
    AllZeroCounts,

    #[error("NaN loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },

    #[error("invalid binary file: {0}")]
    Format(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
