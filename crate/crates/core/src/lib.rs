//! CPNet: a context-preserving encoder-decoder CNN for pixel-level shadow
//! segmentation in single RGB images.
//!
//! The crate is self-contained: [`tensor`] provides dense tensors with
//! reverse-mode differentiation, [`nn`] the layers, [`model`] the network,
//! [`metrics`] the soft Jaccard loss and BER/PER evaluation, [`data`] image
//! I/O, augmentation and a synthetic scene generator, [`train`] Adam and
//! checkpoints, and [`infer`] multi-scale ensemble prediction.

pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tape, Tensor, Var};
