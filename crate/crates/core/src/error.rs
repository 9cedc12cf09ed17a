//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad field values, unknown names, rejected presets).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset or recording could not be ingested (missing files, corrupt
    /// layout, manifest mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Array dimensions do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Training or evaluation failed at run time (non-finite loss, missing
    /// checkpoint, degenerate optimization state).
    #[error("run failure: {0}")]
    Run(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArg(msg.into())
    }
    pub fn run(msg: impl Into<String>) -> Self {
        Error::Run(msg.into())
    }
}
