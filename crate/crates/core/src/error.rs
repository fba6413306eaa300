use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("alignment error for {instance}: {message}")]
    Alignment { instance: String, message: String },

    #[error("span error: aspect at {start} (length {len}) out of bounds for {n} tokens")]
    Span { start: usize, len: usize, n: usize },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("missing precomputed embedding for instance {0}")]
    MissingEmbedding(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("batch error: {0}")]
    Batch(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },

    #[error("comparison error: {0}")]
    Comparison(String),

    #[error("storage error at {path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Coarse grouping used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Training,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Tensor(_) | Error::Span { .. } => ErrorKind::Config,
            Error::Parse { .. }
            | Error::Alignment { .. }
            | Error::Ingest(_)
            | Error::MissingEmbedding(_)
            | Error::Batch(_)
            | Error::Comparison(_) => ErrorKind::Data,
            Error::Divergence { .. } => ErrorKind::Training,
            Error::Storage { .. } | Error::Serde(_) => ErrorKind::Io,
        }
    }

    pub fn storage(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Storage {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
