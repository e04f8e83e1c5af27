//! Forward and backward kernels. Shapes follow the `[batch, channels, length]`
//! convention for 1-D feature maps. Every reduction runs in a fixed loop
//! order so results are bit-reproducible.

use crate::scalar::Scalar;

use super::{NnError, Tensor};

fn shape_err(msg: String) -> NnError {
    NnError::ShapeMismatch(msg)
}

fn dims3<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize), NnError> {
    match *t.shape() {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(shape_err(format!("{what} must be 3-D, got {:?}", t.shape()))),
    }
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize), NnError> {
    match *t.shape() {
        [a, b] => Ok((a, b)),
        _ => Err(shape_err(format!("{what} must be 2-D, got {:?}", t.shape()))),
    }
}

/// Output length of a sliding window, or `None` when the window does not fit.
pub fn window_out_len(length: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > length + 2 * padding {
        return None;
    }
    Some((length + 2 * padding - kernel) / stride + 1)
}

/// Output positions `t` for which `t * stride + k - padding` lies in `[0, length)`.
fn valid_t(k: usize, stride: usize, padding: usize, length: usize, out_len: usize) -> (usize, usize) {
    let lo = if padding > k {
        (padding - k).div_ceil(stride)
    } else {
        0
    };
    // t * stride + k - padding <= length - 1
    let hi = if length + padding > k {
        ((length + padding - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Cross-correlation `out[b,o,t] = bias[o] + sum_{c,k} w[o,c,k] x[b,c,t*s+k-p]`.
pub fn conv1d_forward<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    input: &Tensor<T>,
    spec: Conv1dSpec,
) -> Result<Tensor<T>, NnError> {
    let (batch, in_ch, length) = dims3(input, "conv input")?;
    let (out_ch, w_in, kernel) = dims3(weight, "conv weight")?;
    if w_in != in_ch {
        return Err(shape_err(format!(
            "conv weight expects {w_in} input channels, input has {in_ch}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [out_ch] {
            return Err(shape_err(format!("conv bias shape {:?}", b.shape())));
        }
    }
    let out_len = window_out_len(length, kernel, spec.stride, spec.padding).ok_or_else(|| {
        shape_err(format!(
            "kernel {kernel} stride {} does not fit length {length} with padding {}",
            spec.stride, spec.padding
        ))
    })?;
    let x = input.data();
    let w = weight.data();
    let mut out = vec![T::zero(); batch * out_ch * out_len];
    for b in 0..batch {
        for o in 0..out_ch {
            let row = &mut out[(b * out_ch + o) * out_len..][..out_len];
            if let Some(bias) = bias {
                row.iter_mut().for_each(|v| *v = bias.data()[o]);
            }
            for c in 0..in_ch {
                let xin = &x[(b * in_ch + c) * length..][..length];
                for k in 0..kernel {
                    let wv = w[(o * in_ch + c) * kernel + k];
                    let (lo, hi) = valid_t(k, spec.stride, spec.padding, length, out_len);
                    for (t, r) in row.iter_mut().enumerate().take(hi).skip(lo) {
                        *r += wv * xin[t * spec.stride + k - spec.padding];
                    }
                }
            }
        }
    }
    Tensor::new(vec![batch, out_ch, out_len], out)
}

pub(crate) fn conv1d_backward<T: Scalar>(
    weight: &Tensor<T>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    spec: Conv1dSpec,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [batch, in_ch, length] = *input.shape() else {
        unreachable!()
    };
    let [out_ch, _, kernel] = *weight.shape() else {
        unreachable!()
    };
    let out_len = grad_out.shape()[2];
    let x = input.data();
    let w = weight.data();
    let g = grad_out.data();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); out_ch];
    for b in 0..batch {
        for o in 0..out_ch {
            let grow = &g[(b * out_ch + o) * out_len..][..out_len];
            db[o] += grow.iter().copied().sum::<T>();
            for c in 0..in_ch {
                let base = (b * in_ch + c) * length;
                for k in 0..kernel {
                    let wi = (o * in_ch + c) * kernel + k;
                    let wv = w[wi];
                    let (lo, hi) = valid_t(k, spec.stride, spec.padding, length, out_len);
                    let mut acc = T::zero();
                    for (t, &gv) in grow.iter().enumerate().take(hi).skip(lo) {
                        let xi = base + t * spec.stride + k - spec.padding;
                        acc += gv * x[xi];
                        dx[xi] += gv * wv;
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![out_ch], db).expect("shape"),
    )
}

/// Batch statistics of a train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased variance used for normalization.
    pub var: Vec<T>,
    /// Unbiased variance for the running estimate (equals `var` when only
    /// one value per channel is available).
    pub var_unbiased: Vec<T>,
}

pub(crate) struct BnTrainOut<T> {
    pub out: Tensor<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: BatchStats<T>,
}

fn check_bn<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(usize, usize, usize), NnError> {
    let (batch, ch, length) = dims3(input, "batch-norm input")?;
    if gamma.shape() != [ch] || beta.shape() != [ch] {
        return Err(shape_err(format!(
            "batch-norm affine params must be [{ch}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok((batch, ch, length))
}

pub(crate) fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<BnTrainOut<T>, NnError> {
    let (batch, ch, length) = check_bn(input, gamma, beta)?;
    let n = batch * length;
    let nf = T::of_usize(n);
    let x = input.data();
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    for c in 0..ch {
        let mut s = T::zero();
        for b in 0..batch {
            s += x[(b * ch + c) * length..][..length].iter().copied().sum::<T>();
        }
        let m = s / nf;
        let mut ss = T::zero();
        for b in 0..batch {
            for &v in &x[(b * ch + c) * length..][..length] {
                ss += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = ss / nf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * length;
            for i in off..off + length {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma.data()[c] * h + beta.data()[c];
            }
        }
    }
    let var_unbiased = if n > 1 {
        var.iter().map(|&v| v * nf / T::of_usize(n - 1)).collect()
    } else {
        var.clone()
    };
    Ok(BnTrainOut {
        out: Tensor::new(input.shape().to_vec(), out)?,
        xhat,
        inv_std,
        stats: BatchStats {
            mean,
            var,
            var_unbiased,
        },
    })
}

pub(crate) fn batchnorm_train_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [batch, ch, length] = *shape else {
        unreachable!()
    };
    let nf = T::of_usize(batch * length);
    let g = grad_out.data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * length;
            for i in off..off + length {
                dbeta[c] += g[i];
                dgamma[c] += g[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); g.len()];
    for b in 0..batch {
        for c in 0..ch {
            let scale = gamma.data()[c] * inv_std[c] / nf;
            let off = (b * ch + c) * length;
            for i in off..off + length {
                dx[i] = scale * (nf * g[i] - dbeta[c] - xhat[i] * dgamma[c]);
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), dx).expect("shape"),
        Tensor::new(vec![ch], dgamma).expect("shape"),
        Tensor::new(vec![ch], dbeta).expect("shape"),
    )
}

/// Eval-mode batch norm: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>, NnError> {
    let (batch, ch, length) = check_bn(input, gamma, beta)?;
    if running_mean.shape() != [ch] || running_var.shape() != [ch] {
        return Err(shape_err("running statistics shape".into()));
    }
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let inv = T::one() / (running_var.data()[c] + eps).sqrt();
            let (g, be, m) = (gamma.data()[c], beta.data()[c], running_mean.data()[c]);
            let off = (b * ch + c) * length;
            for i in off..off + length {
                out[i] = g * (x[i] - m) * inv + be;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Max over windows; padded positions never win. Returns the output and,
/// per output element, the flat input index of the (first) maximum.
pub fn maxpool1d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<T>, Vec<usize>), NnError> {
    let (batch, ch, length) = dims3(input, "max-pool input")?;
    if 2 * padding > kernel {
        return Err(shape_err(format!(
            "max-pool padding {padding} exceeds half the kernel {kernel}"
        )));
    }
    let out_len = window_out_len(length, kernel, stride, padding)
        .ok_or_else(|| shape_err(format!("max-pool window does not fit length {length}")))?;
    let x = input.data();
    let mut out = Vec::with_capacity(batch * ch * out_len);
    let mut arg = Vec::with_capacity(batch * ch * out_len);
    for bc in 0..batch * ch {
        let base = bc * length;
        for t in 0..out_len {
            let start = (t * stride) as isize - padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize) as usize).min(length);
            let mut best = lo;
            for i in lo + 1..hi {
                if x[base + i] > x[base + best] {
                    best = i;
                }
            }
            out.push(x[base + best]);
            arg.push(base + best);
        }
    }
    Ok((Tensor::new(vec![batch, ch, out_len], out)?, arg))
}

/// Mean over the length axis: `[batch, ch, length] -> [batch, ch]`.
pub fn global_avgpool1d_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    let (batch, ch, length) = dims3(input, "global pool input")?;
    let lf = T::of_usize(length);
    let out = input
        .data()
        .chunks(length)
        .map(|row| row.iter().copied().sum::<T>() / lf)
        .collect();
    Tensor::new(vec![batch, ch], out)
}

/// `y = x W^T + b` for `x: [batch, in]`, `W: [out, in]`.
pub fn linear_forward<T: Scalar>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    input: &Tensor<T>,
) -> Result<Tensor<T>, NnError> {
    let (batch, inp) = dims2(input, "linear input")?;
    let (out_f, w_in) = dims2(weight, "linear weight")?;
    if w_in != inp || bias.shape() != [out_f] {
        return Err(shape_err(format!(
            "linear weight {:?} / bias {:?} incompatible with input {:?}",
            weight.shape(),
            bias.shape(),
            input.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(batch * out_f);
    for b in 0..batch {
        let xr = &x[b * inp..][..inp];
        for o in 0..out_f {
            let wr = &w[o * inp..][..inp];
            let dot: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            out.push(dot + bias.data()[o]);
        }
    }
    Tensor::new(vec![batch, out_f], out)
}

pub(crate) fn linear_backward<T: Scalar>(
    weight: &Tensor<T>,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [batch, inp] = *input.shape() else {
        unreachable!()
    };
    let out_f = weight.shape()[0];
    let (x, w, g) = (input.data(), weight.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); out_f];
    for b in 0..batch {
        for o in 0..out_f {
            let gv = g[b * out_f + o];
            db[o] += gv;
            for i in 0..inp {
                dx[b * inp + i] += gv * w[o * inp + i];
                dw[o * inp + i] += gv * x[b * inp + i];
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape"),
        Tensor::new(weight.shape().to_vec(), dw).expect("shape"),
        Tensor::new(vec![out_f], db).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, data).unwrap()
    }

    const UNIT: Conv1dSpec = Conv1dSpec {
        stride: 1,
        padding: 0,
    };

    #[test]
    fn conv_examples() {
        let x = t(&[1, 1, 3], &[1.0, 2.0, 3.0]);
        let id = conv1d_forward(&t(&[1, 1, 1], &[1.0]), Some(&t(&[1], &[0.0])), &x, UNIT).unwrap();
        assert_eq!(id.data(), &[1.0, 2.0, 3.0]);
        let y = conv1d_forward(&t(&[1, 1, 2], &[1.0, 0.0]), None, &x, UNIT).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let y = conv1d_forward(&t(&[1, 1, 2], &[1.0, 1.0]), None, &x, UNIT).unwrap();
        assert_eq!(y.data(), &[3.0, 5.0]);
    }

    #[test]
    fn conv_padding_and_stride() {
        let x = t(&[1, 1, 5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let w = t(&[1, 1, 3], &[1.0, 1.0, 1.0]);
        let spec = Conv1dSpec {
            stride: 2,
            padding: 1,
        };
        let y = conv1d_forward(&w, None, &x, spec).unwrap();
        // windows [0,1,2], [2,3,4], [4,5,0]
        assert_eq!(y.data(), &[3.0, 9.0, 9.0]);
        let too_big = t(&[1, 1, 7], &[0.0; 7]);
        assert!(conv1d_forward(&too_big, None, &x, UNIT).is_err());
        let wrong_ch = t(&[1, 2, 1], &[0.0; 2]);
        assert!(conv1d_forward(&wrong_ch, None, &x, UNIT).is_err());
    }

    #[test]
    fn batchnorm_examples() {
        let g = t(&[1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let out = batchnorm_train(&t(&[2, 1, 1], &[1.0, 3.0]), &g, &b, 1e-12).unwrap();
        assert_abs_diff_eq!(out.out.data()[0], -1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(out.out.data()[1], 1.0, epsilon = 1e-9);
        assert_eq!(out.stats.mean, vec![2.0]);
        assert_eq!(out.stats.var, vec![1.0]);
        assert_eq!(out.stats.var_unbiased, vec![2.0]);
        let flat = batchnorm_train(&t(&[1, 1, 4], &[5.0; 4]), &g, &b, 1e-5).unwrap();
        assert!(flat.out.data().iter().all(|v| v.abs() < 1e-12));
        let x = t(&[1, 1, 3], &[0.3, -2.0, 7.0]);
        let y = batchnorm_eval(&x, &g, &b, &t(&[1], &[0.0]), &t(&[1], &[1.0]), 1e-5).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-4);
        }
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let data: Vec<f64> = (0..24).map(|i| (i * 7 % 11) as f64 * 1.5 - 3.0).collect();
        let x = t(&[3, 2, 4], &data);
        let out = batchnorm_train(&x, &t(&[2], &[1.0, 1.0]), &t(&[2], &[0.0, 0.0]), 1e-5).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3)
                .flat_map(|b| out.out.data()[(b * 2 + c) * 4..][..4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 12.0;
            assert_abs_diff_eq!(m, 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn pooling_and_relu_examples() {
        assert_eq!(relu_forward(&t(&[2], &[-1.0, 2.0])).data(), &[0.0, 2.0]);
        let (y, arg) = maxpool1d_forward(&t(&[1, 1, 4], &[1.0, 5.0, 2.0, 4.0]), 2, 2, 0).unwrap();
        assert_eq!(y.data(), &[5.0, 4.0]);
        assert_eq!(arg, vec![1, 3]);
        let (y, _) = maxpool1d_forward(&t(&[1, 1, 4], &[-1.0, -5.0, -2.0, -4.0]), 3, 2, 1).unwrap();
        assert_eq!(y.data(), &[-1.0, -2.0]);
        let avg = global_avgpool1d_forward(&t(&[1, 1, 3], &[2.0, 4.0, 6.0])).unwrap();
        assert_eq!(avg.shape(), &[1, 1]);
        assert_eq!(avg.data(), &[4.0]);
    }

    #[test]
    fn linear_affine_map() {
        let w = t(&[2, 3], &[1.0, 0.0, -1.0, 2.0, 1.0, 0.5]);
        let b = t(&[2], &[0.5, -1.0]);
        let y = linear_forward(&w, &b, &t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(y.data(), &[-1.5, 4.5]);
        assert!(linear_forward(&w, &b, &t(&[1, 2], &[1.0, 2.0])).is_err());
    }
}
