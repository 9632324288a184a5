//! Point-cloud activity recognition with multi-head adaptive kernel graph
//! convolutions.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff and neural primitives.
//! * [`graph`]: shared k-nearest-neighbour index and edge features.
//! * [`mak`]: the adaptive-kernel operator (kernel generation, head filtering,
//!   residual integration).
//! * [`model`]: the five-stage network, its ablation variants and the
//!   analytical cost model.
//! * [`train`]: SGD with momentum, cosine schedule, early stopping, metrics
//!   and checkpoints.
//! * [`data`]: frame files, windowing, splits, streaming assembly and a
//!   synthetic activity generator.

pub mod data;
pub mod error;
pub mod graph;
pub mod instrument;
pub mod mak;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
