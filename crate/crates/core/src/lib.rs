//! Cross-modal transfer of a vision-transformer encoder to tabular
//! classification.
//!
//! A tabular row `x ∈ ℝᴹ` is mapped by an adaptation network of `n` small
//! feed-forward projections to `n` pseudo patch embeddings, prefixed with the
//! encoder's CLS token, run through a (usually frozen) pre-trained encoder
//! slice, and classified from the CLS output by a fresh head.

pub mod autodiff;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;
