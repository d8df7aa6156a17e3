use std::path::PathBuf;

use thiserror::Error;

use crate::training::{Checkpoint, CollapseReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} values")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index {index} out of range for table of {size} rows")]
    Index { index: usize, size: usize },

    #[error("batch too small: {op} needs at least 2 rows, got {rows}")]
    BatchTooSmall { op: &'static str, rows: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("division guard: column {column} of {side} has zero norm")]
    DivisionGuard { side: &'static str, column: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("embedding file {path}: line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at {stage} step {step}: loss {loss}")]
    Divergence {
        stage: &'static str,
        step: usize,
        loss: f64,
        checkpoint: Box<Checkpoint>,
    },

    #[error("embedding collapse at epoch {}: {}", .0.epoch, .0.reason)]
    Collapse(Box<CollapseReport>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
