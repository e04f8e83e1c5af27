//! The 1-D ResNet-18 embedder: maps a sorted quantile vector of width `h`
//! to a `k`-dimensional embedding.
//!
//! Topology: stem conv (kernel 7, stride 2, padding 3), batch norm, ReLU,
//! max-pool (kernel 3, stride 2, padding 1), four stages of basic residual
//! blocks (two kernel-3 convs, each followed by batch norm), global average
//! pooling and a fully connected layer. Stages 2-4 downsample by 2 in their
//! first block; projection shortcuts (1x1 conv + batch norm) are used only
//! where the block changes shape.

mod arch;
mod checkpoint;
mod model;

use thiserror::Error;

pub use arch::{ArchConfig, InputNorm, Ratio, STAGE_BASE_CHANNELS};
pub use checkpoint::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use model::{build_model, BlockSpec, ForwardPass, Model, TrainingMeta};

use crate::nn::NnError;
use crate::sampling::{self, SampledVector, SamplingError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("input width {got} does not match model width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported checkpoint format version {0}")]
    FormatVersionMismatch(u32),
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    ChecksumMismatch,
    #[error("invalid checkpoint: {0}")]
    InvalidFormat(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

impl ModelError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::InvalidArch(_) => "InvalidArch",
            Self::WidthMismatch { .. } => "WidthMismatch",
            Self::Io(_) => "IoError",
            Self::FormatVersionMismatch(_) => "FormatVersionMismatch",
            Self::ChecksumMismatch => "ChecksumMismatch",
            Self::InvalidFormat(_) => "InvalidFormat",
            Self::Nn(e) => e.name(),
            Self::Sampling(e) => e.name(),
        }
    }
}

/// Output of the embedder.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> EmbeddingVector<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `signed_log` maps `v -> sign(v) ln(1 + |v|)`; `none` is the identity.
/// Both are monotone, so sorted inputs stay sorted.
pub fn normalize_input<T: Scalar>(raw: &SampledVector<T>, mode: InputNorm) -> SampledVector<T> {
    match mode {
        InputNorm::None => raw.clone(),
        InputNorm::SignedLog => raw.map(|v| v.signum() * v.abs().ln_1p()),
    }
}

/// Inverse-transform sampling at the model width followed by the model's
/// input normalization.
pub fn preprocess<T: Scalar>(values: &[f64], arch: &ArchConfig) -> Result<SampledVector<T>, SamplingError> {
    let sampled = sampling::sample_inverse_transform(values, arch.h)?;
    let normalized = normalize_input(&sampled, arch.input_norm);
    Ok(SampledVector::from_vec_unchecked(
        normalized.values().iter().map(|&v| T::of(v)).collect(),
    ))
}
