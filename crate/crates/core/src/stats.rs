//! Weighted-ensemble estimators: weighted means, effective sample size,
//! batch (sub-ensemble) precision, accuracy against the exact filter, and
//! divergence detection.
//!
//! All reductions run sequentially in trajectory-index order so results are
//! bit-reproducible regardless of how the ensemble was evolved.

use std::fmt;
use std::ops::{Add, Div, Mul};

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};

/// Below this the magnitude of a weight sum is treated as underflow.
pub const WEIGHT_SUM_UNDERFLOW: f64 = 1e-300;

/// Real or complex ensemble scalar.
pub trait EnsembleScalar:
    Copy + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self> + fmt::Debug
{
    const ZERO: Self;
    fn modulus(self) -> f64;
    fn real(self) -> f64;
    fn finite(self) -> bool;
    fn scale(self, by: f64) -> Self;
}

impl EnsembleScalar for f64 {
    const ZERO: Self = 0.0;
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn real(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn scale(self, by: f64) -> Self {
        self * by
    }
}

impl EnsembleScalar for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn real(self) -> f64 {
        self.re
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
    fn scale(self, by: f64) -> Self {
        self * by
    }
}

/// `E_f[f] = sum_i w_i f_i / sum_i w_i`.
pub fn weighted_mean<T: EnsembleScalar>(values: &[T], weights: &[T]) -> Result<T> {
    if values.len() != weights.len() {
        return Err(Error::Usage(format!(
            "weighted_mean: {} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.is_empty() {
        return Err(Error::Usage("weighted_mean: empty ensemble".into()));
    }
    let mut num = T::ZERO;
    let mut den = T::ZERO;
    for (&v, &w) in values.iter().zip(weights) {
        num = num + w * v;
        den = den + w;
    }
    if den.modulus() == 0.0 {
        return Err(Error::Divergence(
            "weighted_mean: weights sum to zero".into(),
        ));
    }
    Ok(num / den)
}

/// `(sum |w|)^2 / sum |w|^2`; zero when every weight is zero.
pub fn effective_sample_size<T: EnsembleScalar>(weights: &[T]) -> f64 {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for &w in weights {
        let m = w.modulus();
        s1 += m;
        s2 += m * m;
    }
    if s2 == 0.0 {
        0.0
    } else {
        s1 * s1 / s2
    }
}

/// Sample standard deviation (n - 1 normalisation); NaN for fewer than two samples.
pub fn sample_stddev(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Full-ensemble weighted mean together with its batch-means standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEstimate<T> {
    pub value: T,
    /// `stddev(real parts of batch_means) / sqrt(batch_count)`; NaN for a single batch.
    pub precision: f64,
    pub batch_means: Vec<T>,
}

/// Splits the ensemble into `batch_count` contiguous index ranges and
/// estimates the standard error of the weighted mean from the batch means.
pub fn batch_estimate<T: EnsembleScalar>(
    values: &[T],
    weights: &[T],
    batch_count: usize,
) -> Result<BatchEstimate<T>> {
    if values.len() != weights.len() {
        return Err(Error::Usage(format!(
            "batch_estimate: {} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if batch_count == 0 || values.is_empty() || !values.len().is_multiple_of(batch_count) {
        return Err(Error::Usage(format!(
            "batch_estimate: {batch_count} batches do not divide {} samples",
            values.len()
        )));
    }
    let size = values.len() / batch_count;
    let batch_means = values
        .chunks_exact(size)
        .zip(weights.chunks_exact(size))
        .enumerate()
        .map(|(b, (v, w))| {
            weighted_mean(v, w)
                .map_err(|_| Error::Divergence(format!("batch {b} has zero total weight")))
        })
        .collect::<Result<Vec<T>>>()?;
    let value = weighted_mean(values, weights)?;
    let reals: Vec<f64> = batch_means.iter().map(|m| m.real()).collect();
    let precision = sample_stddev(&reals) / (batch_count as f64).sqrt();
    Ok(BatchEstimate {
        value,
        precision,
        batch_means,
    })
}

/// Pointwise `|method - oracle|`. Missing (NaN) method values stay missing.
pub fn accuracy_series(method_means: &[f64], oracle_means: &[f64]) -> Result<Vec<f64>> {
    if method_means.len() != oracle_means.len() {
        return Err(Error::Usage(format!(
            "accuracy_series: grids differ ({} vs {} points)",
            method_means.len(),
            oracle_means.len()
        )));
    }
    Ok(method_means
        .iter()
        .zip(oracle_means)
        .map(|(m, o)| (m - o).abs())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceCause {
    NonFinite,
    EssCollapse,
    WeightSumUnderflow,
}

impl fmt::Display for DivergenceCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DivergenceCause::NonFinite => "non_finite",
            DivergenceCause::EssCollapse => "ess_collapse",
            DivergenceCause::WeightSumUnderflow => "weight_sum_underflow",
        })
    }
}

/// First divergence of an ensemble, if any. `time` and `cause` are set together.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DivergenceStatus {
    pub time: Option<f64>,
    pub cause: Option<DivergenceCause>,
}

impl DivergenceStatus {
    pub fn converged() -> Self {
        Self::default()
    }

    pub fn at(time: f64, cause: DivergenceCause) -> Self {
        DivergenceStatus {
            time: Some(time),
            cause: Some(cause),
        }
    }

    pub fn diverged(&self) -> bool {
        self.time.is_some()
    }

    /// Keeps the earliest flag.
    pub fn latch(&mut self, other: DivergenceStatus) {
        if !self.diverged() && other.diverged() {
            *self = other;
        }
    }
}

/// Consistent view of an ensemble's weights at one instant.
#[derive(Debug, Clone, Copy)]
pub struct EnsembleSnapshot<'a, T> {
    /// Weights in any common normalisation.
    pub weights: &'a [T],
    /// Every trajectory coordinate is finite.
    pub values_finite: bool,
    /// Smallest `|sum w|` over independent sub-ensembles, in the stored normalisation.
    pub min_weight_sum: f64,
}

/// Flags non-finite state, weight-sum underflow, or ESS below
/// `ess_fraction_threshold * len`, in that order of precedence.
pub fn detect_divergence<T: EnsembleScalar>(
    snapshot: &EnsembleSnapshot<'_, T>,
    ess_fraction_threshold: f64,
    t: f64,
) -> DivergenceStatus {
    let finite = snapshot.values_finite
        && snapshot.min_weight_sum.is_finite()
        && snapshot.weights.iter().all(|w| w.finite());
    if !finite {
        return DivergenceStatus::at(t, DivergenceCause::NonFinite);
    }
    if snapshot.min_weight_sum < WEIGHT_SUM_UNDERFLOW {
        return DivergenceStatus::at(t, DivergenceCause::WeightSumUnderflow);
    }
    let ess = effective_sample_size(snapshot.weights);
    if ess < ess_fraction_threshold * snapshot.weights.len() as f64 {
        return DivergenceStatus::at(t, DivergenceCause::EssCollapse);
    }
    DivergenceStatus::converged()
}
