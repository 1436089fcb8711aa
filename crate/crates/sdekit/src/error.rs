//! Crate-wide error type.
//!
//! One enum covers the whole pipeline because errors flow across layers: a
//! singular Gram matrix raised while fitting surfaces through model scoring,
//! and file problems surface through the CLI. Variants carry enough context
//! to act on without string-parsing.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A simulated state stopped being finite. `step` counts integration
    /// steps from the start of the main phase (after any burn-in).
    #[error("state became non-finite at integration step {step}")]
    NonFinite { step: usize },

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation produced too few rows to be a trajectory.
    #[error("operation left fewer than two states")]
    EmptyResult,

    /// A drift term has no counterpart in the basis library.
    #[error("drift not representable in the library: {reason}")]
    NotRepresentable { reason: String },

    /// The Gram matrix of the requested model is numerically singular,
    /// typically from duplicate basis functions or far too little data.
    #[error("singular Gram matrix (condition below 1e-12)")]
    SingularGram,

    /// The diffusion estimate cannot be inverted into a weight matrix.
    #[error("diffusion estimate is singular; cannot form a weight")]
    SingularWeight,

    #[error("not enough data for {what}: need at least {needed}, got {got}")]
    InsufficientData {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    /// A mathematical precondition fails, e.g. asymptotic formulas evaluated
    /// below their validity range.
    #[error("domain error: {reason}")]
    DomainError { reason: String },

    #[error("invalid parameter: {reason}")]
    InvalidParameter { reason: String },

    /// The combination of method and data is deliberately not implemented.
    #[error("unsupported: {reason}")]
    Unsupported { reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(reason: impl Into<String>) -> Self {
        Error::DomainError {
            reason: reason.into(),
        }
    }
}
