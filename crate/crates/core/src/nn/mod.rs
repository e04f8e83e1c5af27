//! Minimal dense-tensor engine: 1-D convolution, batch normalization, ReLU,
//! pooling and fully connected layers with reverse-mode differentiation,
//! plus momentum SGD.

mod graph;
pub mod layers;
mod optim;
mod tensor;

use thiserror::Error;

pub use graph::{Gradients, Graph, Var};
pub use layers::{
    batchnorm_eval, conv1d_forward, global_avgpool1d_forward, linear_forward,
    maxpool1d_forward, relu_forward, BatchStats, Conv1dSpec,
};
pub use optim::{sgd_step, SgdConfig, SgdState};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl NnError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::ShapeMismatch(_) => "ShapeMismatch",
            Self::NonScalarLoss(_) => "NonScalarLoss",
        }
    }
}

/// Named parameter arrays of one layer, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub name: String,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: crate::scalar::Scalar> LayerParams<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            arrays: Vec::new(),
        }
    }

    pub fn with(mut self, key: &str, t: Tensor<T>) -> Self {
        self.arrays.push((key.to_string(), t));
        self
    }

    pub fn get(&self, key: &str) -> Option<&Tensor<T>> {
        self.arrays.iter().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor<T>> {
        self.arrays.iter_mut().find(|(k, _)| k == key).map(|(_, t)| t)
    }

    pub fn cast<U: crate::scalar::Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            name: self.name.clone(),
            arrays: self.arrays.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }
}

/// Batch-norm evaluation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch norm over `[batch, ch, length]` driven by a layer's `gamma`, `beta`,
/// `running_mean` and `running_var` arrays. Train mode normalizes with the
/// batch statistics and folds them into the running estimates with weight
/// `momentum`; eval mode uses the running estimates.
pub fn batchnorm1d_forward<T: crate::scalar::Scalar>(
    params: &mut LayerParams<T>,
    input: &Tensor<T>,
    mode: BnMode,
    eps: T,
    momentum: T,
) -> Result<Tensor<T>, NnError> {
    let missing = |k: &str| NnError::ShapeMismatch(format!("layer {} lacks {k}", params.name));
    let gamma = params.get("gamma").ok_or_else(|| missing("gamma"))?;
    let beta = params.get("beta").ok_or_else(|| missing("beta"))?;
    let rm = params.get("running_mean").ok_or_else(|| missing("running_mean"))?;
    let rv = params.get("running_var").ok_or_else(|| missing("running_var"))?;
    match mode {
        BnMode::Eval => batchnorm_eval(input, gamma, beta, rm, rv, eps),
        BnMode::Train => {
            let r = layers::batchnorm_train(input, gamma, beta, eps)?;
            update_running_stats(params, &r.stats, momentum);
            Ok(r.out)
        }
    }
}

/// `running = (1 - momentum) * running + momentum * batch`.
pub fn update_running_stats<T: crate::scalar::Scalar>(
    params: &mut LayerParams<T>,
    stats: &BatchStats<T>,
    momentum: T,
) {
    let keep = T::one() - momentum;
    if let Some(rm) = params.get_mut("running_mean") {
        for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + momentum * m;
        }
    }
    if let Some(rv) = params.get_mut("running_var") {
        for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
            *r = keep * *r + momentum * v;
        }
    }
}
