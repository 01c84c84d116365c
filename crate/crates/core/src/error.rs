use thiserror::Error;

/// Errors produced by the fusion library.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("resource limit exceeded: {what} needs {requested} entries, limit is {limit}")]
    ResourceLimit {
        what: &'static str,
        requested: u128,
        limit: u128,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        message: msg.into(),
    }
}
