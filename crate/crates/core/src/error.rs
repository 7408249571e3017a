use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data failed a shape or finiteness check.
    #[error("validation error: {0}")]
    Validation(String),
    /// A configuration is infeasible or out of range.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called in a way its contract forbids.
    #[error("usage error: {0}")]
    Usage(String),
    /// A mathematical quantity is undefined for the given arguments.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}
