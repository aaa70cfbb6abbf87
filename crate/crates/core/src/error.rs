use thiserror::Error;

/// Errors raised by the forward models, gradients, optimizers and engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("out of band: {0}")]
    OutOfBand(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
