//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape mismatch in {op}: lhs {lhs:?}, rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Input data is malformed (CSV schema, label ranges, empty rows).
    #[error("data error: {0}")]
    Data(String),

    /// A tokenizer or vocabulary problem.
    #[error("vocabulary error: {0}")]
    Vocab(String),

    /// Checkpoint file is unreadable, truncated, or has the wrong version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A function under gradient check evaluated to NaN or infinity.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// Training produced a non-finite loss.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
