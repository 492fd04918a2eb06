use thiserror::Error;

/// Errors raised anywhere in the model stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: String },
    #[error("{what}: index {index} out of range 0..{bound}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("mask entries must be 0 or 1 (found {0})")]
    NonBinaryMask(String),
    #[error("degenerate batch: loss mask has no scored positions")]
    DegenerateBatch,
    #[error("empty sequence")]
    EmptySequence,
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("join: {0}")]
    Join(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
