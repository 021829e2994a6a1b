//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An instance record failed validation; carries the offending index.
    #[error("instance {index} rejected: {reason}")]
    BadInstance { index: usize, reason: String },

    /// Tool execution failed while assembling a stack.
    #[error("tool '{tool_id}' failed: {reason}")]
    ToolFailed { tool_id: String, reason: String },

    /// Channel layout of a stack/mask does not match the toolbox.
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    /// Selector response could not be interpreted.
    #[error("selector response parse error: {0}")]
    ParseError(String),

    /// AUC is undefined because only one class is present.
    #[error("AUC undefined: only one class present")]
    UndefinedAuc,

    /// Conditioning event has zero probability in the joint table.
    #[error("zero-probability conditioning event")]
    ZeroProbabilityEvent,

    /// Training aborted with non-finite loss.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    /// Model/experiment configuration is invalid.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
