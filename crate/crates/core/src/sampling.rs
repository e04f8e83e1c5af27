//! Fixed-width quantile vectors from variable-length attributes.
//!
//! The empirical CDF keeps integer cumulative counts, so the grid lookup
//! `min{v : F(v) >= i/h}` compares `count * h >= i * n` exactly instead of
//! comparing rounded probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum SamplingError {
    #[error("empty input")]
    EmptyInput,
    #[error("non-finite input value")]
    NonFinite,
    #[error("sample width must be at least 1")]
    InvalidWidth,
    #[error("probability {0} outside (0, 1]")]
    ProbabilityOutOfRange(f64),
}

impl SamplingError {
    pub fn name(&self) -> &'static str {
        match self {
            Self::EmptyInput => "EmptyInput",
            Self::NonFinite => "NonFinite",
            Self::InvalidWidth => "InvalidWidth",
            Self::ProbabilityOutOfRange(_) => "ProbabilityOutOfRange",
        }
    }
}

/// Empirical CDF over the distinct values of an attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable<T> {
    support: Vec<T>,
    cum_counts: Vec<u64>,
    n: u64,
}

impl<T: Scalar> CdfTable<T> {
    /// Strictly increasing distinct values.
    pub fn support(&self) -> &[T] {
        &self.support
    }

    /// Number of values `<= support[i]`.
    pub fn cum_counts(&self) -> &[u64] {
        &self.cum_counts
    }

    pub fn total(&self) -> u64 {
        self.n
    }

    /// `F(support[i])`; the last entry is exactly 1.
    pub fn cum_prob(&self) -> Vec<f64> {
        self.cum_counts
            .iter()
            .map(|&c| c as f64 / self.n as f64)
            .collect()
    }

    /// `F^{-1}(p) = min{v : F(v) >= p}` for `p` in (0, 1].
    pub fn inverse(&self, p: f64) -> Result<T, SamplingError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(SamplingError::ProbabilityOutOfRange(p));
        }
        let n = self.n as f64;
        let idx = self.cum_counts.partition_point(|&c| (c as f64) < p * n);
        Ok(self.support[idx.min(self.support.len() - 1)])
    }

    /// `F^{-1}(i / h)` with exact rational comparison.
    pub fn inverse_at_grid(&self, i: u64, h: u64) -> T {
        debug_assert!(i >= 1 && i <= h);
        let target = i as u128 * self.n as u128;
        let idx = self
            .cum_counts
            .partition_point(|&c| (c as u128) * (h as u128) < target);
        self.support[idx]
    }
}

fn check_values<T: Scalar>(values: &[T]) -> Result<(), SamplingError> {
    if values.is_empty() {
        return Err(SamplingError::EmptyInput);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(SamplingError::NonFinite);
    }
    Ok(())
}

fn sorted<T: Scalar>(values: &[T]) -> Vec<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    v
}

pub fn empirical_cdf<T: Scalar>(values: &[T]) -> Result<CdfTable<T>, SamplingError> {
    check_values(values)?;
    let sorted = sorted(values);
    let mut support = Vec::new();
    let mut cum_counts = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if support.last() == Some(&v) {
            *cum_counts.last_mut().expect("non-empty") = i as u64 + 1;
        } else {
            support.push(v);
            cum_counts.push(i as u64 + 1);
        }
    }
    Ok(CdfTable {
        support,
        cum_counts,
        n: sorted.len() as u64,
    })
}

pub fn inverse_cdf<T: Scalar>(cdf: &CdfTable<T>, p: f64) -> Result<T, SamplingError> {
    cdf.inverse(p)
}

/// Sorted, fixed-width input vector for the embedding network.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledVector<T> {
    values: Vec<T>,
}

impl<T: Scalar> SampledVector<T> {
    /// Wraps an already-sorted vector; fails when it is empty or decreasing.
    pub fn from_sorted(values: Vec<T>) -> Result<Self, SamplingError> {
        if values.is_empty() {
            return Err(SamplingError::InvalidWidth);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SamplingError::NonFinite);
        }
        debug_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        Ok(Self { values })
    }

    pub(crate) fn from_vec_unchecked(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `x[i-1] = F^{-1}(i/h)` for `i = 1..=h`.
pub fn sample_inverse_transform<T: Scalar>(
    values: &[T],
    h: usize,
) -> Result<SampledVector<T>, SamplingError> {
    if h == 0 {
        return Err(SamplingError::InvalidWidth);
    }
    let cdf = empirical_cdf(values)?;
    let out = (1..=h as u64)
        .map(|i| cdf.inverse_at_grid(i, h as u64))
        .collect();
    Ok(SampledVector { values: out })
}

/// `h` draws with replacement, sorted ascending.
pub fn sample_random_choice<T: Scalar>(
    values: &[T],
    h: usize,
    seed: u64,
) -> Result<SampledVector<T>, SamplingError> {
    if h == 0 {
        return Err(SamplingError::InvalidWidth);
    }
    check_values(values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<T> = (0..h)
        .map(|_| values[rng.random_range(0..values.len())])
        .collect();
    Ok(SampledVector {
        values: sorted(&picks),
    })
}

/// Sampling strategy selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMethod {
    InverseTransform,
    RandomChoice { seed: u64 },
}

pub fn sample<T: Scalar>(
    values: &[T],
    h: usize,
    method: SamplingMethod,
) -> Result<SampledVector<T>, SamplingError> {
    match method {
        SamplingMethod::InverseTransform => sample_inverse_transform(values, h),
        SamplingMethod::RandomChoice { seed } => sample_random_choice(values, h, seed),
    }
}

/// Largest gap between the empirical CDF of `sample` and that of `data`,
/// evaluated at every point of either support.
pub fn cdf_sup_distance<T: Scalar>(sample: &[T], data: &[T]) -> f64 {
    crate::baselines::ks_statistic(sample, data)
        .map(|d| d.to_f64_lossy())
        .unwrap_or(f64::NAN)
}
