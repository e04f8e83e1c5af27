//! Semantic labeling of numerical table attributes.
//!
//! An attribute (a bag of numbers) is reduced to a fixed-width quantile
//! vector, embedded by a small 1-D residual network trained with a triplet
//! loss, and labeled by nearest neighbour against a store of labeled
//! attributes. Statistical-test baselines share the same labeling pipeline.

pub mod baselines;
pub mod cli;
pub mod dataset;
pub mod embnet;
mod io;
pub mod labeling;
pub mod metric;
pub mod nn;
pub mod sampling;
pub mod scalar;

pub use baselines::{BaselineError, LogisticModel};
pub use dataset::{Dataset, DatasetError, NumericAttribute};
pub use embnet::{ArchConfig, ModelError};
pub use io::write_atomic;
pub use labeling::LabelingError;
pub use metric::{TrainConfig, TrainError};
pub use nn::NnError;
pub use sampling::{SampledVector, SamplingError};
pub use scalar::Scalar;

pub type Tensor32 = nn::Tensor<f32>;
pub type Tensor64 = nn::Tensor<f64>;
pub type Model32 = embnet::Model<f32>;
pub type Model64 = embnet::Model<f64>;
pub type Embedding32 = embnet::EmbeddingVector<f32>;
pub type Sampled32 = sampling::SampledVector<f32>;
pub type Sampled64 = sampling::SampledVector<f64>;
