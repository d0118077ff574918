use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the grounding, evaluation and tooling routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("undefined geometry: {0}")]
    UndefinedGeometry(String),
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("invalid anthropometry: body height {0} must be positive")]
    InvalidAnthropometry(f64),
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("cosine similarity undefined for zero-norm vector")]
    UndefinedCosine,
    #[error("no candidate masks")]
    NoCandidates,
    #[error("mask has no depth channel")]
    MissingDepth,
    #[error("box {0} lies outside the feature map")]
    OutOfBounds(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("exact solver limited to {limit} videos, got {got}")]
    SizeGuard { limit: usize, got: usize },
    #[error("cannot merge trees: {0}")]
    MergeFailure(String),
    #[error("invalid taxonomy graph: {0}")]
    Graph(String),
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("missing referenced file {0}")]
    MissingFile(PathBuf),
    #[error("bad tensor file: {0}")]
    Tensor(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn schema(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Schema { path: path.into(), line, message: message.into() }
    }
}
