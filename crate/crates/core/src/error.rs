use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
