use std::ops::Range;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on the caller's input did not hold.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown id: {0}")]
    UnknownId(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// Transport-level provider failure; the same request may succeed later.
    #[error("provider transport failure for items {range:?}: {message}")]
    Retryable {
        range: Range<usize>,
        message: String,
    },

    /// The provider answered, but not in the agreed shape.
    #[error("provider protocol error for items {range:?}: {message}")]
    Protocol {
        range: Range<usize>,
        message: String,
        raw: Option<String>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("store schema version {found} cannot be loaded by this build (expects {expected})")]
    Migration { found: u64, expected: u64 },

    #[error("store failed validation: {}", join_violations(.0))]
    Validation(Vec<Violation>),

    #[error("store is locked by another process: {0}")]
    Locked(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn protocol(range: Range<usize>, msg: impl Into<String>, raw: Option<String>) -> Self {
        Error::Protocol {
            range,
            message: msg.into(),
            raw,
        }
    }

    /// True for failures that originate in an external provider.
    pub fn is_provider(&self) -> bool {
        matches!(self, Error::Retryable { .. } | Error::Protocol { .. })
    }
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
