use thiserror::Error;

use crate::container::ContainerError;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Undefined(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
