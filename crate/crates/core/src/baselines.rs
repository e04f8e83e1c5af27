//! Distribution-comparison statistics over raw attribute values and the
//! scorers built on them: KS-only ranking, and a logistic-regression
//! combination of KS, Mann-Whitney and numeric Jaccard features.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite input value")]
    NonFinite,
    #[error("at least two values per sample are required")]
    TooFewValues,
    #[error("both samples have zero variance")]
    DegenerateVariance,
    #[error("training pairs must contain both same-label and different-label examples")]
    SingleClassTraining,
}

impl BaselineError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::EmptyInput => "EmptyInput",
            Self::NonFinite => "NonFinite",
            Self::TooFewValues => "TooFewValues",
            Self::DegenerateVariance => "DegenerateVariance",
            Self::SingleClassTraining => "SingleClassTraining",
        }
    }
}

fn check<T: Scalar>(a: &[T], b: &[T]) -> Result<(), BaselineError> {
    if a.is_empty() || b.is_empty() {
        return Err(BaselineError::EmptyInput);
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(BaselineError::NonFinite);
    }
    Ok(())
}

fn cmp<T: Scalar>(x: &T, y: &T) -> Ordering {
    x.partial_cmp(y).expect("finite values")
}

fn sorted<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(cmp);
    v
}

/// Two value lists to compare.
#[derive(Debug, Clone, Copy)]
pub struct StatPair<'a, T> {
    pub a: &'a [T],
    pub b: &'a [T],
}

impl<'a, T: Scalar> StatPair<'a, T> {
    pub fn new(a: &'a [T], b: &'a [T]) -> Result<Self, BaselineError> {
        check(a, b)?;
        Ok(Self { a, b })
    }
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_statistic<T: Scalar>(a: &[T], b: &[T]) -> Result<T, BaselineError> {
    check(a, b)?;
    Ok(ks_sorted(&sorted(a), &sorted(b)))
}

/// KS on pre-sorted inputs. The CDF gap is tracked as the integer
/// `|i * m - j * n|` and divided once at the end.
pub fn ks_sorted<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut best: u128 = 0;
    while i < n && j < m {
        let x = if cmp(&a[i], &b[j]) == Ordering::Greater {
            b[j]
        } else {
            a[i]
        };
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        let gap = (i as i128 * m as i128 - j as i128 * n as i128).unsigned_abs();
        best = best.max(gap);
    }
    // once one side is exhausted the gap shrinks monotonically to zero
    T::of(best as f64 / (n as f64 * m as f64))
}

/// Twice the Mann-Whitney U of `a` against `b`: `2 * #{x < y} + #{x == y}`.
fn mw_twice_u<T: Scalar>(a: &[T], b_sorted: &[T]) -> u128 {
    a.iter()
        .map(|x| {
            let le = b_sorted.partition_point(|y| y <= x);
            let lt = b_sorted.partition_point(|y| y < x);
            let greater = b_sorted.len() - le;
            let ties = le - lt;
            2 * greater as u128 + ties as u128
        })
        .sum()
}

/// `U / (n_a n_b)`: the probability that a value of `b` exceeds a value of
/// `a`, ties counting half. `mw(a, b) + mw(b, a) == 1` holds exactly.
pub fn mw_statistic<T: Scalar>(a: &[T], b: &[T]) -> Result<T, BaselineError> {
    check(a, b)?;
    let twice_u = mw_twice_u(a, &sorted(b));
    let total = 2 * a.len() as u128 * b.len() as u128;
    // evaluate the upper half as a complement so both orders round alike
    let r = if 2 * twice_u <= total {
        twice_u as f64 / total as f64
    } else {
        1.0 - (total - twice_u) as f64 / total as f64
    };
    Ok(T::of(r))
}

fn mean_var<T: Scalar>(v: &[T]) -> (T, T) {
    let n = T::of_usize(v.len());
    let mean = v.iter().copied().sum::<T>() / n;
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
    (mean, ss / (n - T::one()))
}

/// Welch's t statistic with unbiased sample variances.
pub fn welch_t<T: Scalar>(a: &[T], b: &[T]) -> Result<T, BaselineError> {
    check(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(BaselineError::TooFewValues);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == T::zero() && vb == T::zero() {
        return Err(BaselineError::DegenerateVariance);
    }
    let na = T::of_usize(a.len());
    let nb = T::of_usize(b.len());
    Ok((ma - mb) / (va / na + vb / nb).sqrt())
}

fn range<T: Scalar>(v: &[T]) -> (T, T) {
    v.iter()
        .fold((v[0], v[0]), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Overlap of the two value ranges divided by the width of their union.
pub fn numeric_jaccard<T: Scalar>(a: &[T], b: &[T]) -> Result<T, BaselineError> {
    check(a, b)?;
    let (lo_a, hi_a) = range(a);
    let (lo_b, hi_b) = range(b);
    Ok(jaccard_from_ranges((lo_a, hi_a), (lo_b, hi_b)))
}

fn jaccard_from_ranges<T: Scalar>((lo_a, hi_a): (T, T), (lo_b, hi_b): (T, T)) -> T {
    let union = hi_a.max(hi_b) - lo_a.min(lo_b);
    if union == T::zero() {
        // both ranges collapse to points; equal points overlap fully
        return if lo_a == lo_b { T::one() } else { T::zero() };
    }
    let overlap = (hi_a.min(hi_b) - lo_a.max(lo_b)).max(T::zero());
    overlap / union
}

/// Similarity-increasing feature vector of a pair:
/// `(1 - KS, 1 - 2 |MW - 0.5|, numeric Jaccard)`.
pub fn dsl_features<T: Scalar>(a: &[T], b: &[T]) -> Result<[T; 3], BaselineError> {
    let ks = ks_statistic(a, b)?;
    let mw = mw_statistic(a, b)?;
    let jac = numeric_jaccard(a, b)?;
    let two = T::of(2.0);
    let half = T::of(0.5);
    Ok([T::one() - ks, T::one() - (mw - half).abs() * two, jac])
}

/// Logistic similarity model over [`dsl_features`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: [f64; 3],
    pub bias: f64,
}

impl LogisticModel {
    pub fn zero() -> Self {
        Self {
            weights: [0.0; 3],
            bias: 0.0,
        }
    }

    pub fn probability(&self, features: &[f64; 3]) -> f64 {
        let z = self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum::<f64>();
        sigmoid(z)
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fits the logistic model by full-batch gradient descent on the mean
/// log-loss. Weights are projected onto `w >= 0` after every step so that
/// the score stays monotone in every similarity feature; the bias is free.
pub fn dsl_train_features(
    samples: &[([f64; 3], bool)],
    iters: usize,
    lr: f64,
) -> Result<LogisticModel, BaselineError> {
    if !samples.iter().any(|s| s.1) || !samples.iter().any(|s| !s.1) {
        return Err(BaselineError::SingleClassTraining);
    }
    // balance the classes so rare positive pairs are not swamped
    let pos = samples.iter().filter(|s| s.1).count() as f64;
    let neg = samples.len() as f64 - pos;
    let (w_pos, w_neg) = (0.5 / pos, 0.5 / neg);
    let mut model = LogisticModel::zero();
    for _ in 0..iters {
        let mut gw = [0.0; 3];
        let mut gb = 0.0;
        for (x, y) in samples {
            let p = model.probability(x);
            let (target, weight) = if *y { (1.0, w_pos) } else { (0.0, w_neg) };
            let err = (p - target) * weight;
            for k in 0..3 {
                gw[k] += err * x[k];
            }
            gb += err;
        }
        for k in 0..3 {
            model.weights[k] = (model.weights[k] - lr * gw[k]).max(0.0);
        }
        model.bias -= lr * gb;
    }
    Ok(model)
}

/// Computes features of every pair and fits [`LogisticModel`].
pub fn dsl_train(
    pairs: &[(StatPair<'_, f64>, bool)],
    iters: usize,
    lr: f64,
) -> Result<LogisticModel, BaselineError> {
    let samples = pairs
        .iter()
        .map(|(p, same)| dsl_features(p.a, p.b).map(|f| (f, *same)))
        .collect::<Result<Vec<_>, _>>()?;
    dsl_train_features(&samples, iters, lr)
}

/// Builds training pairs from every unordered pair of attributes.
pub fn dsl_train_on_dataset(
    dataset: &crate::dataset::Dataset,
    iters: usize,
    lr: f64,
) -> Result<LogisticModel, BaselineError> {
    let attrs = dataset.attributes();
    let mut pairs = Vec::new();
    for i in 0..attrs.len() {
        for j in i + 1..attrs.len() {
            pairs.push((
                StatPair::new(attrs[i].values(), attrs[j].values())?,
                attrs[i].label() == attrs[j].label(),
            ));
        }
    }
    dsl_train(&pairs, iters, lr)
}

/// `1 - KS`.
pub fn semantictyper_score<T: Scalar>(a: &[T], b: &[T]) -> Result<T, BaselineError> {
    Ok(T::one() - ks_statistic(a, b)?)
}

pub fn dsl_score(model: &LogisticModel, a: &[f64], b: &[f64]) -> Result<f64, BaselineError> {
    Ok(model.probability(&dsl_features(a, b)?))
}
