//! Binary-code visual search.
//!
//! The crate covers the offline and online halves of an image search stack
//! operating on precomputed embeddings:
//!
//! - [`model`]: embeddings, binary codes, items and ranked lists.
//! - [`fusion`]: category prediction from classifier scores fused with a
//!   kernel-weighted neighbour vote.
//! - [`mining`]: turning click logs into filtered training triplets.
//! - [`ranking`]: triplet ranking losses, the soft rectangular detection
//!   mask, a toy embedder with analytic gradients and its training loop.
//! - [`index`]: banded binary inverted index with coarse Hamming filtering
//!   and float re-ranking, plus the on-disk snapshot format.
//! - [`cluster`]: sharded scatter-gather and replica routing.
//! - [`rerank`]: boosted-tree quality scoring and top-N re-ranking.
//! - [`synthetic`]: seeded fixture generators.

pub mod cluster;
pub mod error;
pub mod fusion;
pub mod index;
pub mod mining;
pub mod model;
pub mod ranking;
pub mod rerank;
pub mod synthetic;

pub use error::{Error, Result};
