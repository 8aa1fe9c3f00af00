//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or dimension mismatch between tensors or model parts.
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },

    /// A caller-supplied value violates a precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A NaN or infinity showed up where only finite values are allowed.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted because the loss or a gradient blew up.
    #[error("training diverged: {0}")]
    Diverged(String),

    /// Experiment configuration is inconsistent or incomplete.
    #[error("configuration error: {0}")]
    Config(String),

    /// Retrieval protocol violation (e.g. a probe identity missing from the gallery).
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A checkpoint file is unreadable or does not match the expected schema.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            actual,
        }
    }

    /// True for errors caused by bad inputs/configuration rather than a
    /// failure at run time. The CLI maps these to a distinct exit code.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Dimension { .. }
                | Error::InvalidArgument(_)
                | Error::Config(_)
                | Error::Checkpoint(_)
                | Error::Protocol(_)
        )
    }
}
