//! Importance-score pruning for dense and convolutional networks.
//!
//! Every connection (or convolution kernel) and every bias is scored by the
//! average absolute signal it delivers to its target neuron or filter over a
//! pruning set. Each target keeps the smallest set of top-scored contributors
//! that carries a fraction `alpha` of its total signal; the rest are masked.
//! [`pipeline`] alternates that pruning pass with masked retraining, and
//! [`bounds`] checks the resulting signal deviation against its analytic bound.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! element type for the common cases.

pub mod bounds;
pub mod data;
pub mod error;
pub mod importance;
pub mod metrics;
pub mod network;
pub mod pipeline;
pub mod presets;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Network32 = network::Network<f32>;
pub type Network64 = network::Network<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type ImportanceScores32 = importance::ImportanceScores<f32>;
pub type ImportanceScores64 = importance::ImportanceScores<f64>;
