use thiserror::Error;

/// Errors produced by any layer of the framework.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An agent failed to meet its success criterion within the training budget.
    #[error("training failed: {0}")]
    Training(String),
    /// Trace generation exhausted its retry budget.
    #[error("trace generation failed: {0}")]
    Generation(String),
    /// The planner did not reach the goal within the episode limit.
    #[error("planning failed: {0}")]
    Planning(String),
    /// An observation could not be encoded for the given environment.
    #[error("encoding error: {0}")]
    Encoding(String),
    /// Vector or matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// Goal adaptation could not build a library for some goal.
    #[error("adaptation failed: {0}")]
    Adaptation(String),
    /// Bad experiment or CLI configuration.
    #[error("invalid config: {0}")]
    Config(String),
    /// A checkpoint file could not be parsed.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
