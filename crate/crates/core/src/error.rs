use alloc::string::String;

/// Errors raised anywhere in the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("graph state error: {0}")]
    State(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("training diverged at iteration {iteration}: {reason}")]
    Training { iteration: usize, reason: String },
    #[error("adaptation failed at epoch {epoch}: {reason}")]
    Adaptation { epoch: usize, reason: String },
}

pub type Result<T> = core::result::Result<T, Error>;
