use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DilError>;

#[derive(Debug, Error)]
pub enum DilError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DilError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        DilError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DilError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DilError::Config(_) | DilError::InvalidArgument(_) => 2,
            DilError::Data(_) | DilError::Io { .. } => 3,
            DilError::NonFinite { .. } => 4,
            DilError::Checkpoint(_) => 5,
            DilError::Shape { .. } | DilError::Graph(_) => 1,
        }
    }

    /// Stable single-word tag used as the prefix of CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            DilError::Shape { .. } => "shape",
            DilError::NonFinite { .. } => "numeric",
            DilError::InvalidArgument(_) => "argument",
            DilError::Graph(_) => "graph",
            DilError::Config(_) => "config",
            DilError::Data(_) => "data",
            DilError::Checkpoint(_) => "checkpoint",
            DilError::Io { .. } => "io",
        }
    }
}
