//! Minimal deterministic CNN training engine.

pub mod conv;
pub mod dataset;
pub mod gradcheck;
pub mod im2col;
pub mod layers;
pub mod model;
pub mod sgd;
pub mod train;

pub use conv::{ConvLayer, ParamGrad};
pub use dataset::Dataset;
pub use gradcheck::{gradient_check, GradCheckReport};
pub use im2col::{im2col, ConvGeometry};
pub use layers::{softmax_cross_entropy, FcLayer, MaxPool};
pub use model::{format_architecture, parse_architecture, ConvNet, Grads, Layer, LayerSpec, Objective};
pub use sgd::{Sgd, SgdConfig};
pub use train::{evaluate, BatchSampler, Evaluation, Trainer};
