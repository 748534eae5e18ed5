use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be positive")]
    InvalidShape(Vec<usize>),

    #[error("shape {shape:?} holds {expected} elements but {actual} values were supplied")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("backward needs a scalar objective, got shape {0:?}")]
    NonScalarObjective(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("encoder length trace {trace} does not end at latent width {latent_dim}")]
    ShapeChain { trace: String, latent_dim: usize },

    #[error("{phase} diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged {
        phase: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("subject {subject:?}: series length {found} differs from expected {expected}")]
    SeriesLength {
        subject: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown subject id {0:?}")]
    UnknownSubject(String),

    #[error("no tabled studentized range critical value for k={k}, df={df}, alpha={alpha}")]
    UnsupportedRange { k: usize, df: usize, alpha: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}
