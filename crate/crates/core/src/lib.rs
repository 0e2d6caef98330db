//! Structured probabilistic pruning (SPP) for small convolutional networks.
//!
//! The crate is split the same way the pipeline is:
//!
//! - [`nn`]: a deterministic im2col CNN engine with column masks, backprop and SGD.
//! - [`spp`]: the probabilistic pruning schedule, mask sampling and the pruning loop.
//! - [`criteria`]: L1 importance, ranking, one-shot L1 pruning, PCA sensitivity and
//!   FLOP-targeted ratio allocation.
//! - [`harness`]: datasets, configuration, checkpoints, metrics CSV and the
//!   dense-vs-compacted inference benchmark.
//!
//! With the default `parallel` feature, batch-level loops run on rayon. Partial sums
//! are always reduced in a fixed chunk order, so results are bit-identical with and
//! without the feature.

pub mod criteria;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
mod parallel;
pub mod real;
pub mod spp;
pub mod tensor;

pub use error::{Error, Result};
pub use parallel::single_threaded;
pub use real::Real;
pub use tensor::Tensor;
