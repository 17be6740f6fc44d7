//! Differentiable ranking: triplet losses, the soft detection mask, a toy
//! embedder with analytic gradients and a gradient-descent training loop.

pub mod checkpoint;
pub mod data;
pub mod embedder;
pub mod loss;
pub mod mask;
pub mod train;

pub use embedder::{embed_masked, ToyEmbedder, ToyImage};
pub use loss::{batch_loss, triplet_loss, DEFAULT_MARGIN};
pub use mask::{iou, soft_mask, MaskParams, Rect};
pub use train::{gradients, train, Gradients, QueryGroup, TrainConfig, TrainState};
