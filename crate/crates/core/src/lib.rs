//! Desk-scale deep-learning stack for monocular depth estimation with a
//! full-skip-connection encoder-decoder and an adaptive concatenation module.
//!
//! The crate is organized as:
//! - [`tensor`]: NCHW tensors, the autodiff tape, and gradient checking.
//! - [`model`]: the encoder-decoder family with switchable skip topology.
//! - [`loss`]: scale-invariant log loss and the standard depth metrics.
//! - [`data`]: synthetic scenes, on-disk datasets, augmentation, batching.
//! - [`train`]: AdamW, the LR schedule, the training loop, checkpoints.
//! - [`gradcheck`]: the full finite-difference verification suite.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{FscnError, Result};
pub use tensor::{Graph, NodeId, Scalar, Shape, Tensor};
