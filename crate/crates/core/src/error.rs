use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("node {endpoint}: {message}")]
    Node { endpoint: String, message: String },

    #[error("timed out waiting for node(s): {}", .endpoints.join(", "))]
    Timeout { endpoints: Vec<String> },

    #[error("cluster build failed: {}", .failures.join("; "))]
    BuildFailed { failures: Vec<String> },

    #[error("snapshot: {0}")]
    Snapshot(String),

    #[error("data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn protocol(msg: impl Into<String>) -> Self {
        Error::Protocol(msg.into())
    }
}
