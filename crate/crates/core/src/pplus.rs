//! Positive-P weighted trajectories on the doubled phase space `(alpha, beta)`
//! with a complex weight `omega`, coupled through the weighted mean field
//! `E_f[beta alpha]`.
//!
//! Stratonovich system, shared measurement noise `dW`, per-trajectory
//! fictitious noises `dV1`, `dV2`:
//!
//! ```text
//! d alpha = -2 gamma alpha (beta alpha - E_f) dt + sqrt(gamma) alpha o (i dV1 + i dV2 + dW)
//! d beta  = -2 gamma beta  (beta alpha - E_f) dt + sqrt(gamma) beta  o (-i dV1 + i dV2 + dW)
//! d omega = -2 gamma omega (beta alpha + (beta alpha)^2 - 2 beta alpha E_f) dt
//!           + 2 sqrt(gamma) omega beta alpha o dW
//! ```
//!
//! The stochastic weight term can also be written with the mean-subtracted
//! factor `2 (beta alpha - E_f)`. The difference is common to all trajectories
//! and cancels in every weighted average, so the uncentred form is used.
//!
//! The ensemble is split into independent replicas (contiguous index ranges).
//! Each replica carries its own mean field, so replica averages are
//! statistically independent and their spread is an honest error bar.

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stats::{self, EnsembleSnapshot};

/// Weights are renormalised every this many steps.
pub const RENORMALIZE_EVERY: usize = 100;

/// Rebase a replica early once a log-weight drifts past this magnitude.
const LOG_WEIGHT_LIMIT: f64 = 300.0;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct PPlusEnsemble {
    /// `ln alpha_i`, `ln beta_i`, `ln omega_i` (complex logarithms).
    pub log_alpha: Vec<Complex64>,
    pub log_beta: Vec<Complex64>,
    pub log_omega: Vec<Complex64>,
    replica_size: usize,
    step: usize,
}

/// Delta-distributed coherent state: `alpha = a e^{i phase}`, `beta = conj(alpha)`,
/// `omega = 1`. A single replica; see [`PPlusEnsemble::with_replicas`].
pub fn init_pplus(amplitude: f64, phase: f64, n_traj: usize) -> Result<PPlusEnsemble> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::Usage(format!(
            "coherent amplitude must be finite and >= 0, got {amplitude}"
        )));
    }
    if n_traj == 0 {
        return Err(Error::Usage("empty positive-P ensemble".into()));
    }
    let a0 = Complex64::from_polar(amplitude, phase);
    Ok(PPlusEnsemble {
        log_alpha: vec![a0.ln(); n_traj],
        log_beta: vec![a0.conj().ln(); n_traj],
        log_omega: vec![Complex64::new(0.0, 0.0); n_traj],
        replica_size: n_traj,
        step: 0,
    })
}

fn max_re(logs: &[Complex64]) -> f64 {
    logs.iter().map(|l| l.re).fold(f64::NEG_INFINITY, f64::max)
}

/// `ln sum e^{l_i}` for complex `l_i`.
fn log_sum_exp(logs: &[Complex64]) -> Complex64 {
    let shift = max_re(logs);
    let s: Complex64 = logs.iter().map(|l| (l - shift).exp()).sum();
    s.ln() + shift
}

impl PPlusEnsemble {
    /// Splits the ensemble into `count` independent replicas.
    pub fn with_replicas(mut self, count: usize) -> Result<Self> {
        if count == 0 || !self.len().is_multiple_of(count) {
            return Err(Error::Usage(format!(
                "{count} replicas do not divide {} trajectories",
                self.len()
            )));
        }
        self.replica_size = self.len() / count;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    pub fn replica_size(&self) -> usize {
        self.replica_size
    }

    pub fn replica_count(&self) -> usize {
        self.len() / self.replica_size
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn alpha(&self) -> Vec<Complex64> {
        self.log_alpha.iter().map(|l| l.exp()).collect()
    }

    pub fn beta(&self) -> Vec<Complex64> {
        self.log_beta.iter().map(|l| l.exp()).collect()
    }

    /// Weights in the stored normalisation.
    pub fn omega(&self) -> Vec<Complex64> {
        self.log_omega.iter().map(|l| l.exp()).collect()
    }

    /// `beta_i alpha_i`, the per-trajectory estimator of `<a^dag a>`.
    pub fn number_samples(&self) -> Vec<Complex64> {
        self.log_alpha
            .iter()
            .zip(&self.log_beta)
            .map(|(a, b)| (a + b).exp())
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        let bad = |l: &Complex64| l.re.is_nan() || l.im.is_nan() || l.re == f64::INFINITY;
        !self
            .log_alpha
            .iter()
            .chain(&self.log_beta)
            .chain(&self.log_omega)
            .any(bad)
    }

    /// `sum omega` of each replica, in the stored normalisation.
    pub fn replica_weight_sums(&self) -> Vec<Complex64> {
        self.log_omega
            .chunks_exact(self.replica_size)
            .map(|lw| lw.iter().map(|l| l.exp()).sum())
            .collect()
    }

    /// Weights rescaled per replica so every replica sums to its size. The
    /// full weighted mean then equals the average of replica means.
    pub fn normalized_weights(&self) -> Vec<Complex64> {
        let size = self.replica_size as f64;
        let mut out = Vec::with_capacity(self.len());
        for lw in self.log_omega.chunks_exact(self.replica_size) {
            let shift = max_re(lw);
            let w: Vec<Complex64> = lw.iter().map(|l| (l - shift).exp()).collect();
            let s: Complex64 = w.iter().sum();
            let f = size / s;
            out.extend(w.iter().map(|wi| wi * f));
        }
        out
    }

    /// `|sum omega| / n_traj` in the stored normalisation.
    pub fn weight_sum_magnitude(&self) -> f64 {
        log_sum_exp(&self.log_omega).re.exp() / self.len() as f64
    }

    /// Divergence check at time `t`.
    pub fn divergence(&self, ess_fraction_threshold: f64, t: f64) -> stats::DivergenceStatus {
        let weights = self.normalized_weights();
        // Relative to the largest weight of the replica, so only cancellation
        // between complex weights can drive this towards underflow.
        let min_sum = self
            .log_omega
            .chunks_exact(self.replica_size)
            .map(|lw| (log_sum_exp(lw).re - max_re(lw)).exp())
            .fold(f64::INFINITY, f64::min);
        let snapshot = EnsembleSnapshot {
            weights: &weights,
            values_finite: self.all_finite() && self.number_samples().iter().all(|s| s.is_finite()),
            min_weight_sum: min_sum,
        };
        stats::detect_divergence(&snapshot, ess_fraction_threshold, t)
    }
}

/// Increments of `(ln alpha, ln beta, ln omega)` at one state. By the
/// Stratonovich chain rule the logarithms obey
///
/// ```text
/// d ln alpha = -2 gamma (s - E_f) dt + sqrt(gamma) (i dV1 + i dV2 + dW)
/// d ln beta  = -2 gamma (s - E_f) dt + sqrt(gamma) (-i dV1 + i dV2 + dW)
/// d ln omega = -2 gamma (s + s^2 - 2 s E_f) dt + 2 sqrt(gamma) s dW
/// ```
///
/// with `s = beta alpha`: the noise on the amplitudes becomes additive.
#[inline]
#[allow(clippy::too_many_arguments)]
fn log_increment(
    la: Complex64,
    lb: Complex64,
    mean_field: Complex64,
    dv1: f64,
    dv2: f64,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> (Complex64, Complex64, Complex64) {
    let sg = gamma.sqrt();
    let s = (la + lb).exp();
    let pull = -2.0 * gamma * (s - mean_field) * dt;
    let da = pull + sg * (I * (dv1 + dv2) + dw);
    let db = pull + sg * (I * (dv2 - dv1) + dw);
    let dl = -2.0 * gamma * (s + s * s - 2.0 * s * mean_field) * dt + 2.0 * sg * s * dw;
    (da, db, dl)
}

/// `E_f[beta alpha]` of one replica from log coordinates.
fn mean_field(la: &[Complex64], lb: &[Complex64], lw: &[Complex64]) -> Complex64 {
    let shift = max_re(lw);
    let mut num = Complex64::new(0.0, 0.0);
    let mut den = Complex64::new(0.0, 0.0);
    for ((a, b), l) in la.iter().zip(lb).zip(lw) {
        let w = (l - shift).exp();
        num += w * (a + b).exp();
        den += w;
    }
    num / den
}

/// Semi-implicit midpoint step of one replica, Jacobi-style: every iteration
/// re-evaluates the replica mean field at the current midpoint guess.
/// `x_bar <- x + f(x_bar) / 2`, then `x <- x + f(x_bar)`.
#[allow(clippy::too_many_arguments)]
fn step_replica(
    la: &mut [Complex64],
    lb: &mut [Complex64],
    lw: &mut [Complex64],
    dv1: &[f64],
    dv2: &[f64],
    dw: f64,
    dt: f64,
    gamma: f64,
    iterations: usize,
) {
    let n = la.len();
    let mut ab = la.to_vec();
    let mut bb = lb.to_vec();
    let mut wb = lw.to_vec();
    let zero = Complex64::new(0.0, 0.0);
    let mut inc = vec![(zero, zero, zero); n];
    for j in 0..iterations {
        let e = mean_field(&ab, &bb, &wb);
        for i in 0..n {
            inc[i] = log_increment(ab[i], bb[i], e, dv1[i], dv2[i], dw, dt, gamma);
        }
        if j + 1 < iterations {
            for i in 0..n {
                ab[i] = la[i] + 0.5 * inc[i].0;
                bb[i] = lb[i] + 0.5 * inc[i].1;
                wb[i] = lw[i] + 0.5 * inc[i].2;
            }
        }
    }
    for i in 0..n {
        la[i] += inc[i].0;
        lb[i] += inc[i].1;
        lw[i] += inc[i].2;
    }
}

/// Rebases a replica so its weights sum to the replica size.
fn renormalize_replica(lw: &mut [Complex64]) {
    let shift = log_sum_exp(lw) - (lw.len() as f64).ln();
    if shift.is_finite() {
        lw.iter_mut().for_each(|l| *l -= shift);
    }
}

/// Advances the ensemble by one step. `dv1[i]`, `dv2[i]` are the fictitious
/// increments of trajectory `i`; `dw` is the shared measurement increment.
///
/// Non-finite values are not an error here; they surface through
/// [`PPlusEnsemble::divergence`].
#[allow(clippy::too_many_arguments)]
pub fn step_pplus(
    ens: &mut PPlusEnsemble,
    dw: f64,
    dv1: &[f64],
    dv2: &[f64],
    dt: f64,
    gamma: f64,
    iterations: usize,
) -> Result<()> {
    if dv1.len() != ens.len() || dv2.len() != ens.len() {
        return Err(Error::Usage(format!(
            "step_pplus: {} trajectories but {}/{} fictitious increments",
            ens.len(),
            dv1.len(),
            dv2.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Usage(format!("dt must be > 0, got {dt}")));
    }
    if iterations == 0 {
        return Err(Error::Usage("midpoint needs at least one iteration".into()));
    }
    let size = ens.replica_size;
    let renormalize = (ens.step + 1).is_multiple_of(RENORMALIZE_EVERY);
    ens.log_alpha
        .par_chunks_mut(size)
        .zip(ens.log_beta.par_chunks_mut(size))
        .zip(ens.log_omega.par_chunks_mut(size))
        .zip(dv1.par_chunks(size).zip(dv2.par_chunks(size)))
        .for_each(|(((a, b), w), (v1, v2))| {
            step_replica(a, b, w, v1, v2, dw, dt, gamma, iterations);
            if renormalize || w.iter().any(|l| l.re.abs() > LOG_WEIGHT_LIMIT) {
                renormalize_replica(w);
            }
        });
    ens.step += 1;
    Ok(())
}

/// `(Re E_f[beta alpha], Im E_f[beta alpha])` with replica-normalised weights.
pub fn pplus_mean_number(ens: &PPlusEnsemble) -> Result<(f64, f64)> {
    let sums = ens.replica_weight_sums();
    if let Some(b) = sums.iter().position(|s| s.norm() == 0.0) {
        return Err(Error::Divergence(format!(
            "replica {b} has zero total weight"
        )));
    }
    let m = stats::weighted_mean(&ens.number_samples(), &ens.normalized_weights())?;
    Ok((m.re, m.im))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn coherent_init() {
        let ens = init_pplus(10.0, 0.0, 8).unwrap();
        assert!(ens.alpha().iter().all(|&a| (a - c(10.0)).norm() < 1e-14));
        assert!(ens.beta().iter().all(|&b| (b - c(10.0)).norm() < 1e-14));
        assert!(ens.omega().iter().all(|&w| w == c(1.0)));
        let (re, im) = pplus_mean_number(&ens).unwrap();
        assert!((re - 100.0).abs() < 1e-12 && im == 0.0);

        let ens = init_pplus(0.0, 1.0, 4).unwrap();
        assert_eq!(pplus_mean_number(&ens).unwrap().0, 0.0);

        let ens = init_pplus(3.0, 0.9, 4).unwrap();
        let (re, im) = pplus_mean_number(&ens).unwrap();
        assert!((re - 9.0).abs() < 1e-12 && im.abs() < 1e-12);
    }

    #[test]
    fn mean_of_two_values() {
        let mut ens = init_pplus(1.0, 0.0, 2).unwrap();
        ens.log_alpha = vec![c(99f64.ln()), c(101f64.ln())];
        ens.log_beta = vec![c(0.0), c(0.0)];
        let (re, im) = pplus_mean_number(&ens).unwrap();
        assert!((re - 100.0).abs() < 1e-12 && im == 0.0);
    }

    #[test]
    fn zero_gamma_leaves_ensemble_unchanged() {
        let mut ens = init_pplus(10.0, 0.3, 6).unwrap().with_replicas(2).unwrap();
        let before = ens.clone();
        let dv = [0.1, -0.2, 0.3, 0.05, 0.0, 1.0];
        step_pplus(&mut ens, 0.4, &dv, &dv, 1e-3, 0.0, 3).unwrap();
        assert_eq!(ens.log_alpha, before.log_alpha);
        assert_eq!(ens.log_beta, before.log_beta);
        assert_eq!(ens.log_omega, before.log_omega);
    }

    #[test]
    fn single_trajectory_has_no_drift() {
        // beta alpha = 1 and E_f = beta alpha: both mean-field drifts cancel and
        // the weight drift coefficient is 1 + 1 - 2 = 0.
        let mut ens = init_pplus(1.0, 0.0, 1).unwrap();
        step_pplus(&mut ens, 0.0, &[0.0], &[0.0], 1e-2, 3.0, 3).unwrap();
        assert_eq!(ens.alpha()[0], c(1.0));
        assert_eq!(ens.beta()[0], c(1.0));
        assert_eq!(ens.omega()[0], c(1.0));
    }

    #[test]
    fn single_trajectory_noise_is_multiplicative() {
        let (gamma, dt) = (1.0, 1e-4);
        let (dv1, dv2, dw) = (0.004, -0.007, 0.002);
        let mut ens = init_pplus(1.0, 0.0, 1).unwrap();
        step_pplus(&mut ens, dw, &[dv1], &[dv2], dt, gamma, 4).unwrap();
        let za = gamma.sqrt() * (I * (dv1 + dv2) + dw);
        let zb = gamma.sqrt() * (I * (dv2 - dv1) + dw);
        // With E_f = beta alpha the amplitudes see pure multiplicative noise,
        // integrated exactly in log coordinates.
        assert!((ens.alpha()[0] - za.exp()).norm() < 1e-14);
        assert!((ens.beta()[0] - zb.exp()).norm() < 1e-14);
    }

    #[test]
    fn renormalisation_is_invisible_to_averages() {
        let n = 40;
        let mut a = init_pplus(2.0, 0.0, n).unwrap().with_replicas(4).unwrap();
        let dv1: Vec<f64> = (0..n).map(|i| 0.01 * ((i * 7 % 13) as f64 - 6.0)).collect();
        let dv2: Vec<f64> = (0..n).map(|i| 0.01 * ((i * 5 % 11) as f64 - 5.0)).collect();
        for k in 0..RENORMALIZE_EVERY - 1 {
            let dw = 0.003 * ((k % 5) as f64 - 2.0);
            step_pplus(&mut a, dw, &dv1, &dv2, 1e-3, 0.5, 3).unwrap();
        }
        let before = pplus_mean_number(&a).unwrap();
        let sums_before = a.replica_weight_sums();
        let mut b = a.clone();
        step_pplus(&mut a, 0.001, &dv1, &dv2, 1e-3, 0.5, 3).unwrap();
        // Same step without renormalisation, for reference.
        b.step = 0;
        step_pplus(&mut b, 0.001, &dv1, &dv2, 1e-3, 0.5, 3).unwrap();
        let (ma, mb) = (
            pplus_mean_number(&a).unwrap(),
            pplus_mean_number(&b).unwrap(),
        );
        assert!((ma.0 - mb.0).abs() < 1e-12 * mb.0.abs());
        assert!((ma.1 - mb.1).abs() < 1e-9);
        for s in a.replica_weight_sums() {
            assert!((s - c(10.0)).norm() < 1e-12);
        }
        assert!(sums_before.iter().all(|s| s.norm() > 0.0) && before.0.is_finite());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut ens = init_pplus(1.0, 0.0, 3).unwrap();
        assert!(step_pplus(&mut ens, 0.0, &[0.0; 2], &[0.0; 3], 1e-3, 1.0, 3).is_err());
        assert!(ens.clone().with_replicas(2).is_err());
    }

    #[test]
    fn vacuum_stays_finite() {
        let mut ens = init_pplus(0.0, 0.0, 4).unwrap();
        let dv = [0.1, -0.1, 0.2, 0.0];
        for _ in 0..5 {
            step_pplus(&mut ens, 0.05, &dv, &dv, 1e-3, 1.0, 3).unwrap();
        }
        assert!(ens.all_finite());
        assert_eq!(pplus_mean_number(&ens).unwrap(), (0.0, 0.0));
        assert!(!ens.divergence(0.01, 0.005).diverged());
    }

    #[test]
    fn weights_real_positive_only_at_start() {
        let n = 20;
        let mut ens = init_pplus(10.0, 0.0, n).unwrap();
        assert!(ens.omega().iter().all(|w| w.im == 0.0 && w.re > 0.0));
        let dv1: Vec<f64> = (0..n).map(|i| 0.01 * (i as f64 - 10.0)).collect();
        let dv2: Vec<f64> = (0..n).map(|i| 0.007 * (5.0 - i as f64)).collect();
        step_pplus(&mut ens, 0.01, &dv1, &dv2, 1e-4, 1.0, 3).unwrap();
        assert!(ens.omega().iter().any(|w| w.im != 0.0));
    }
}
