use crate::scalar::Scalar;

use super::{NnError, Tensor};

/// SGD hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig<T> {
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
}

/// Velocity buffers, one per parameter tensor, created lazily as zeros.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new() -> Self {
        Self {
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// One step of momentum SGD with L2 weight decay:
/// `g' = g + wd * p; v = m * v + g'; p = p - lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    cfg: SgdConfig<T>,
    state: &mut SgdState<T>,
) -> Result<(), NnError> {
    if params.len() != grads.len() {
        return Err(NnError::ShapeMismatch(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(NnError::ShapeMismatch("velocity buffer count".into()));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(NnError::ShapeMismatch(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            let gd = gv + cfg.weight_decay * *pv;
            *vv = cfg.momentum * *vv + gd;
            *pv -= cfg.lr * *vv;
        }
    }
    Ok(())
}
