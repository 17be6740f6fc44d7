use thiserror::Error;

use crate::ingest::Reject;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("ingest of {file} aborted: {rejected} of {lines} lines rejected (first: {})", first_reject(.rejects))]
    Ingest {
        file: String,
        rejected: usize,
        lines: usize,
        rejects: Vec<Reject>,
    },

    #[error("frame error: {0}")]
    Frame(String),

    /// An error reported by the remote end of a connection.
    #[error("remote error [{kind}]: {message}")]
    Remote { kind: String, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] vsearch::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn first_reject(rejects: &[Reject]) -> String {
    rejects.first().map_or_else(|| "none".to_string(), |r| r.to_string())
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;
