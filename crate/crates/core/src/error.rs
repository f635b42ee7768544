use thiserror::Error;

pub type Result<T> = std::result::Result<T, SdhError>;

#[derive(Debug, Error)]
pub enum SdhError {
    /// Caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    /// A computation produced a non-finite value or failed to converge.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("horizon {given} is too small for the requested tail tolerance; need at least {required}")]
    HorizonTooSmall { given: usize, required: usize },

    #[error("E-step temperature search failed: {0}")]
    EtaSearch(String),

    /// A learner parameter became non-finite. `snapshot` is the JSON-encoded
    /// agent state at the failing step.
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: u64,
        reason: String,
        snapshot: Box<String>,
    },

    #[error("invalid document: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(SdhError::Usage(msg.into()))
}
