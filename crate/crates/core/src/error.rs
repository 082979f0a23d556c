//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes fed to an operation. Always a programming
    /// error; the message names the operation and the offending dimensions.
    #[error("shape mismatch in `{op}`: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// An operation name that no registry knows about.
    #[error("unknown operation `{0}`")]
    UnknownOp(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// NaN or Inf surfaced where finite values are required. Carries enough
    /// context (step, seed) to reproduce the blow-up.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Misuse of the tape (backward on a frozen tape, non-scalar loss, ...).
    #[error("tape: {0}")]
    Tape(String),

    #[error("dataset: {0}")]
    Dataset(String),

    /// Malformed textual artifact (genotype, policy, log). Includes position
    /// information where available.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, details: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            details: details.into(),
        }
    }
}
