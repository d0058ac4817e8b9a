use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (non-SPD
    /// covariance, nonpositive Beta parameter, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid model or run configuration.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A numerical procedure failed to terminate or lost precision.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Internal bookkeeping was used incorrectly.
    #[error("logic error: {0}")]
    Logic(String),

    /// Malformed input data.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by what the user asked for rather than by a
    /// failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse(_))
    }
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
