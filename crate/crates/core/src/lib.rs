//! Training engine for 1-bit convolutional networks on long-tailed data.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`tensor`]: dense row-major n-d arrays over a generic float scalar.
//! - [`bits`]: bit-packed ±1 tensors and exact XNOR/popcount arithmetic,
//!   including the integer-exact binary convolution kernel.
//! - [`graph`]: a reverse-mode autodiff tape with the layer set needed by
//!   both the float teacher and the binary student (conv, batch norm,
//!   pooling, nearest resize, channel concat, straight-through sign).
//! - [`loss`]: cross-entropy, label-aware smoothed cross-entropy,
//!   temperature KL divergence and cosine feature distance.
//! - [`data`]: CIFAR binary ingestion, synthetic blob datasets, exponential
//!   long-tail derivation, class-balanced sampling.
//! - [`model`] / [`train`]: the teacher and binary student networks and the
//!   calibrate-and-distill training loops with adversarial loss balancing.
//! - [`analysis`]: evaluation reports, classifier weight-norm profiles and
//!   step-cost profiling.
//!
//! All numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`);
//! the concrete aliases below pin the default `f32` engine used by the CLI.

pub mod alloc;
pub mod analysis;
pub mod bits;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default training precision.
pub type F = f32;

pub type Tensor = tensor::Tensor<F>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph = graph::Graph<F>;
pub type Params = graph::Params<F>;
pub type Dataset = data::Dataset<F>;
pub type LtDataset = data::LtDataset<F>;
pub type TeacherModel = model::TeacherModel<F>;
pub type BinaryModel = model::BinaryModel<F>;
pub type Balancer = model::Balancer<F>;
