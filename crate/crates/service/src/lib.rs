//! Operational shell around the `vsearch` core: JSONL ingestion, deployment
//! building and loading, the end-to-end query pipeline, the evaluation
//! harness, and a length-prefixed JSON service over TCP.

pub mod config;
pub mod deploy;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod wire;

pub use error::{ServiceError, ServiceResult};
