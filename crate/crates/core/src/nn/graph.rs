//! Tape of tensor operations with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and [`Graph::backward`] visits every node once, from
//! the loss back to the leaves.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::scalar::Scalar;

use super::layers::{self, BatchStats, Conv1dSpec};
use super::{NnError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv1dSpec,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Running statistics are constants.
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    GatherRows {
        input: Var,
        idx: Vec<usize>,
    },
    RowNorm {
        input: Var,
    },
    AddScalar {
        input: Var,
    },
    Scale {
        input: Var,
        by: T,
    },
    MulConst {
        input: Var,
        weights: Vec<T>,
    },
    Sum {
        input: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recorded forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<(), NnError> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: Conv1dSpec,
    ) -> Result<Var, NnError> {
        let out = layers::conv1d_forward(
            self.value(weight),
            bias.map(|b| self.value(b)),
            self.value(input),
            spec,
        )?;
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                spec,
            },
        ))
    }

    /// Train-mode batch norm; returns the batch statistics for the caller's
    /// running-average update.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>), NnError> {
        let r = layers::batchnorm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            r.out,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat: r.xhat,
                inv_std: r.inv_std,
            },
        );
        Ok((v, r.stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var, NnError> {
        let out = layers::batchnorm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        let inv_std = running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.data().to_vec(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = layers::relu_forward(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn max_pool1d(
        &mut self,
        input: Var,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Var, NnError> {
        let (out, argmax) = layers::maxpool1d_forward(self.value(input), kernel, stride, padding)?;
        Ok(self.push(out, Op::MaxPool { input, argmax }))
    }

    pub fn global_avg_pool1d(&mut self, input: Var) -> Result<Var, NnError> {
        let out = layers::global_avgpool1d_forward(self.value(input))?;
        Ok(self.push(out, Op::GlobalAvgPool { input }))
    }

    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, NnError> {
        let out = layers::linear_forward(self.value(weight), self.value(bias), self.value(input))?;
        Ok(self.push(
            out,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, input: Var, idx: &[usize]) -> Result<Var, NnError> {
        let v = self.value(input);
        let [rows, width] = *v.shape() else {
            return Err(NnError::ShapeMismatch("gather_rows needs a 2-D input".into()));
        };
        if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
            return Err(NnError::ShapeMismatch(format!(
                "row indices out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            data.extend_from_slice(&v.data()[i * width..][..width]);
        }
        let out = Tensor::new(vec![idx.len(), width], data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                input,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Euclidean norm of every row: `[m, k] -> [m]`.
    pub fn row_norm(&mut self, input: Var) -> Result<Var, NnError> {
        let v = self.value(input);
        if v.shape().len() != 2 {
            return Err(NnError::ShapeMismatch("row_norm needs a 2-D input".into()));
        }
        let data = v
            .rows()
            .map(|r| r.iter().map(|&x| x * x).sum::<T>().sqrt())
            .collect();
        let out = Tensor::new(vec![v.shape()[0]], data)?;
        Ok(self.push(out, Op::RowNorm { input }))
    }

    pub fn add_scalar(&mut self, input: Var, c: T) -> Var {
        let out = self.value(input).map(|v| v + c);
        self.push(out, Op::AddScalar { input })
    }

    pub fn scale(&mut self, input: Var, by: T) -> Var {
        let out = self.value(input).map(|v| v * by);
        self.push(out, Op::Scale { input, by })
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, input: Var, weights: &Tensor<T>) -> Result<Var, NnError> {
        same_shape(self.value(input), weights, "mul_const")?;
        let data = self
            .value(input)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&x, &w)| x * w)
            .collect();
        let out = Tensor::new(weights.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::MulConst {
                input,
                weights: weights.data().to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input })
    }

    /// Hash of every piecewise-linear branch taken in the forward pass (ReLU
    /// signs, max-pool winners). Two evaluations with the same signature lie
    /// on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the scalar `loss` with respect to every node it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        if !self.value(loss).is_scalar() {
            return Err(NnError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (dx, dw, db) =
                    layers::conv1d_backward(self.value(*weight), self.value(*input), g, *spec);
                acc(*input, dx);
                acc(*weight, dw);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = layers::batchnorm_train_backward(
                    self.value(*input).shape(),
                    self.value(*gamma),
                    xhat,
                    inv_std,
                    g,
                );
                acc(*input, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let x = self.value(*input);
                let gamma_v = self.value(*gamma).data();
                let [batch, ch, length] = *x.shape() else {
                    unreachable!()
                };
                let mut dx = vec![T::zero(); x.len()];
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for b in 0..batch {
                    for c in 0..ch {
                        let off = (b * ch + c) * length;
                        for j in off..off + length {
                            let gv = g.data()[j];
                            dx[j] = gv * gamma_v[c] * inv_std[c];
                            dg[c] += gv * (x.data()[j] - mean[c]) * inv_std[c];
                            db[c] += gv;
                        }
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
                acc(*gamma, Tensor::new(vec![ch], dg).expect("shape"));
                acc(*beta, Tensor::new(vec![ch], db).expect("shape"));
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                acc(*input, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
            Op::MaxPool { input, argmax } => {
                let x = self.value(*input);
                let mut dx = vec![T::zero(); x.len()];
                for (&a, &gv) in argmax.iter().zip(g.data()) {
                    dx[a] += gv;
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
            }
            Op::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let length = x.shape()[2];
                let lf = T::of_usize(length);
                let dx = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / lf, length))
                    .collect();
                acc(*input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let (dx, dw, db) = layers::linear_backward(self.value(*weight), self.value(*input), g);
                acc(*input, dx);
                acc(*weight, dw);
                acc(*bias, db);
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::GatherRows { input, idx } => {
                let x = self.value(*input);
                let width = x.shape()[1];
                let mut dx = vec![T::zero(); x.len()];
                for (r, &src) in idx.iter().enumerate() {
                    for k in 0..width {
                        dx[src * width + k] += g.data()[r * width + k];
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
            }
            Op::RowNorm { input } => {
                let x = self.value(*input);
                let norms = node.value.data();
                let width = x.shape()[1];
                let mut dx = vec![T::zero(); x.len()];
                for (r, (&n, &gv)) in norms.iter().zip(g.data()).enumerate() {
                    if n > T::zero() {
                        for k in 0..width {
                            dx[r * width + k] = gv * x.data()[r * width + k] / n;
                        }
                    }
                }
                acc(*input, Tensor::new(x.shape().to_vec(), dx).expect("shape"));
            }
            Op::AddScalar { input } => acc(*input, g.clone()),
            Op::Scale { input, by } => acc(*input, g.map(|v| v * *by)),
            Op::MulConst { input, weights } => {
                let data = g.data().iter().zip(weights).map(|(&gv, &w)| gv * w).collect();
                acc(*input, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Sum { input } => {
                let shape = self.value(*input).shape();
                acc(*input, Tensor::full(shape, g.item()));
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf; parameters the loss does not depend on
    /// get zeros and a warning.
    pub fn param(&self, v: Var, graph: &Graph<T>, name: &str) -> Tensor<T> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                log::warn!("parameter {name} is disconnected from the loss; gradient set to zero");
                Tensor::zeros(graph.value(v).shape())
            }
        }
    }
}
