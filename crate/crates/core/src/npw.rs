//! Number-phase Wigner weighted trajectories: frozen integer number `n`,
//! diffusing phase `phi`, and a positive weight driven by the measurement.
//!
//! ```text
//! dn = 0
//! dphi = sqrt(gamma) dV1
//! d omega = gamma omega (-2 n^2 + 4 E_f[n] n) dt + c sqrt(gamma) omega n o dW
//! ```
//!
//! With `n` constant the weight equation is a scalar linear Stratonovich SDE
//! and is stepped by its exact exponential, with `E_f[n]` frozen at the start
//! of the step. Weights are stored as logarithms.
//!
//! As in the positive-P solver, the ensemble is split into independent
//! replicas that each carry their own mean field `E_f[n]`.

use rayon::prelude::*;

use crate::config::NpwNoiseCoefficient;
use crate::error::{Error, Result};
use crate::noise::{sample_poisson, NoiseStreams, StreamTag};
use crate::stats::{self, EnsembleSnapshot};

/// Log-weights are rebased at least this often.
pub const RENORMALIZE_EVERY: usize = 100;

/// Rebase early once any log-weight drifts past this magnitude.
const LOG_WEIGHT_LIMIT: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub struct NpwEnsemble {
    pub n: Vec<u64>,
    pub phi: Vec<f64>,
    pub log_weight: Vec<f64>,
    replica_size: usize,
    step: usize,
}

/// `n_i ~ Poisson(amplitude^2)`, drawn from the trajectory-keyed initial-number
/// streams; `phi_i = phase`; `omega_i = 1`. A single replica.
pub fn init_npw_coherent(
    amplitude: f64,
    phase: f64,
    n_traj: usize,
    streams: &NoiseStreams,
) -> Result<NpwEnsemble> {
    if !(amplitude.is_finite() && amplitude >= 0.0) {
        return Err(Error::Usage(format!(
            "coherent amplitude must be finite and >= 0, got {amplitude}"
        )));
    }
    if n_traj == 0 {
        return Err(Error::Usage("empty number-phase ensemble".into()));
    }
    let lambda = amplitude * amplitude;
    let n = (0..n_traj)
        .into_par_iter()
        .map(|i| {
            sample_poisson(
                lambda,
                &streams.stream(StreamTag::InitialNumber, i as u64),
                0,
            )
        })
        .collect::<Result<Vec<u64>>>()?;
    Ok(NpwEnsemble {
        n,
        phi: vec![phase; n_traj],
        log_weight: vec![0.0; n_traj],
        replica_size: n_traj,
        step: 0,
    })
}

/// `sum e^{l_i - max} f_i` and `sum e^{l_i - max}` for one replica.
fn shifted_sums(log_w: &[f64], f: impl Fn(usize) -> f64) -> (f64, f64) {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &l) in log_w.iter().enumerate() {
        let w = (l - max).exp();
        num += w * f(i);
        den += w;
    }
    (num, den)
}

fn log_sum_exp(log_w: &[f64]) -> f64 {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = log_w.iter().map(|l| (l - max).exp()).sum();
    max + s.ln()
}

impl NpwEnsemble {
    /// Builds an ensemble from explicit numbers, unit weights and zero phase.
    pub fn from_numbers(n: Vec<u64>) -> Result<Self> {
        if n.is_empty() {
            return Err(Error::Usage("empty number-phase ensemble".into()));
        }
        let len = n.len();
        Ok(NpwEnsemble {
            n,
            phi: vec![0.0; len],
            log_weight: vec![0.0; len],
            replica_size: len,
            step: 0,
        })
    }

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
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
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

    pub fn number_samples(&self) -> Vec<f64> {
        self.n.iter().map(|&n| n as f64).collect()
    }

    /// Linear weights rescaled per replica to sum to the replica size.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let size = self.replica_size as f64;
        let mut out = Vec::with_capacity(self.len());
        for lw in self.log_weight.chunks_exact(self.replica_size) {
            let lse = log_sum_exp(lw);
            out.extend(lw.iter().map(|l| size * (l - lse).exp()));
        }
        out
    }

    /// `sum omega / n_traj` in the stored normalisation.
    pub fn weight_sum(&self) -> f64 {
        log_sum_exp(&self.log_weight).exp() / self.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.log_weight.iter().all(|l| l.is_finite()) && self.phi.iter().all(|p| p.is_finite())
    }

    /// Divergence check at time `t`.
    pub fn divergence(&self, ess_fraction_threshold: f64, t: f64) -> stats::DivergenceStatus {
        let weights = self.normalized_weights();
        let min_sum = self
            .log_weight
            .chunks_exact(self.replica_size)
            .map(|lw| log_sum_exp(lw).exp())
            .fold(f64::INFINITY, f64::min);
        let snapshot = EnsembleSnapshot {
            weights: &weights,
            values_finite: self.all_finite(),
            // Log storage cannot underflow; report the rebased sum when finite.
            min_weight_sum: if min_sum.is_finite() && min_sum > 0.0 {
                min_sum
            } else {
                min_sum.max(0.0)
            },
        };
        stats::detect_divergence(&snapshot, ess_fraction_threshold, t)
    }

    /// Weighted histogram of `n` over `0..=cutoff`; weight beyond the cutoff is
    /// dropped before normalisation.
    pub fn number_distribution(&self, cutoff: usize) -> Result<Vec<f64>> {
        let w = self.normalized_weights();
        let mut p = vec![0.0; cutoff + 1];
        for (&n, wi) in self.n.iter().zip(&w) {
            if let Some(slot) = p.get_mut(n as usize) {
                *slot += wi;
            }
        }
        let s: f64 = p.iter().sum();
        if s.is_nan() || s <= 0.0 {
            return Err(Error::Divergence("no weight inside the Fock cutoff".into()));
        }
        p.iter_mut().for_each(|x| *x /= s);
        Ok(p)
    }
}

#[allow(clippy::too_many_arguments)]
fn step_replica(
    n: &[u64],
    phi: &mut [f64],
    log_w: &mut [f64],
    dv1: &[f64],
    dw: f64,
    dt: f64,
    gamma: f64,
    c: f64,
    rebase: bool,
) {
    let (num, den) = shifted_sums(log_w, |i| n[i] as f64);
    let mean = num / den;
    let sg = gamma.sqrt();
    let mut extreme: f64 = 0.0;
    for i in 0..n.len() {
        let nf = n[i] as f64;
        log_w[i] += gamma * (-2.0 * nf * nf + 4.0 * mean * nf) * dt + c * sg * nf * dw;
        phi[i] += sg * dv1[i];
        extreme = extreme.max(log_w[i].abs());
    }
    if rebase || extreme > LOG_WEIGHT_LIMIT {
        let shift = log_sum_exp(log_w) - (n.len() as f64).ln();
        if shift.is_finite() {
            log_w.iter_mut().for_each(|l| *l -= shift);
        }
    }
}

/// Advances the ensemble by one step. `dv1[i]` is the phase-noise increment of
/// trajectory `i`; `dw` the shared measurement increment.
#[allow(clippy::too_many_arguments)]
pub fn step_npw(
    ens: &mut NpwEnsemble,
    dw: f64,
    dv1: &[f64],
    dt: f64,
    gamma: f64,
    coefficient: NpwNoiseCoefficient,
) -> Result<()> {
    if dv1.len() != ens.len() {
        return Err(Error::Usage(format!(
            "step_npw: {} trajectories but {} phase increments",
            ens.len(),
            dv1.len()
        )));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Usage(format!("dt must be > 0, got {dt}")));
    }
    let size = ens.replica_size;
    let c = coefficient.value();
    let rebase = (ens.step + 1).is_multiple_of(RENORMALIZE_EVERY);
    ens.n
        .par_chunks(size)
        .zip(ens.phi.par_chunks_mut(size))
        .zip(ens.log_weight.par_chunks_mut(size))
        .zip(dv1.par_chunks(size))
        .for_each(|(((n, phi), lw), v1)| step_replica(n, phi, lw, v1, dw, dt, gamma, c, rebase));
    ens.step += 1;
    Ok(())
}

/// `E_f[n]` with replica-normalised weights.
pub fn npw_mean_number(ens: &NpwEnsemble) -> Result<f64> {
    stats::weighted_mean(&ens.number_samples(), &ens.normalized_weights())
}

/// Weighted variance of the unwrapped phase.
pub fn npw_phase_spread(ens: &NpwEnsemble) -> Result<f64> {
    let w = ens.normalized_weights();
    let mean = stats::weighted_mean(&ens.phi, &w)?;
    let dev: Vec<f64> = ens.phi.iter().map(|p| (p - mean) * (p - mean)).collect();
    stats::weighted_mean(&dev, &w)
}

/// `E_f[n^2]`; reported as a diagnostic only.
pub fn npw_second_moment(ens: &NpwEnsemble) -> Result<f64> {
    let sq: Vec<f64> = ens.n.iter().map(|&n| (n * n) as f64).collect();
    stats::weighted_mean(&sq, &ens.normalized_weights())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::wiener_increment;

    #[test]
    fn vacuum_init() {
        let ens = init_npw_coherent(0.0, 0.5, 50, &NoiseStreams::new(1)).unwrap();
        assert!(ens.n.iter().all(|&n| n == 0));
        assert!(ens.phi.iter().all(|&p| p == 0.5));
        assert_eq!(npw_mean_number(&ens).unwrap(), 0.0);
        assert_eq!(npw_phase_spread(&ens).unwrap(), 0.0);
    }

    #[test]
    fn mean_examples() {
        let ens = NpwEnsemble::from_numbers(vec![100; 7]).unwrap();
        assert_eq!(npw_mean_number(&ens).unwrap(), 100.0);
        let mut ens = NpwEnsemble::from_numbers(vec![0, 4]).unwrap();
        ens.log_weight = vec![0.0, 3f64.ln()];
        assert!((npw_mean_number(&ens).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn single_number_state_is_exact() {
        let mut ens = NpwEnsemble::from_numbers(vec![100]).unwrap();
        for k in 0..500 {
            let dw = 0.01 * ((k % 7) as f64 - 3.0);
            step_npw(
                &mut ens,
                dw,
                &[0.001],
                1e-3,
                1.0,
                NpwNoiseCoefficient::DerivedTwo,
            )
            .unwrap();
            assert_eq!(npw_mean_number(&ens).unwrap(), 100.0);
        }
        assert_eq!(ens.n, vec![100]);
    }

    #[test]
    fn zero_gamma_is_inert() {
        let streams = NoiseStreams::new(4);
        let mut ens = init_npw_coherent(10.0, 0.0, 100, &streams).unwrap();
        let n0 = ens.n.clone();
        let dv = vec![0.3; 100];
        for _ in 0..50 {
            step_npw(
                &mut ens,
                0.2,
                &dv,
                1e-3,
                0.0,
                NpwNoiseCoefficient::DerivedTwo,
            )
            .unwrap();
        }
        assert_eq!(ens.n, n0);
        assert!(ens.log_weight.iter().all(|&l| l == 0.0));
        assert_eq!(npw_phase_spread(&ens).unwrap(), 0.0);
    }

    #[test]
    fn tracks_two_state_filter() {
        // Exact two-level filter dp_n = 2 sqrt(gamma) (n - <n>) p_n dW, Ito,
        // brute-forced on a grid 256x finer than the ensemble step.
        let gamma: f64 = 1.0;
        let dt = 1e-4;
        let steps = 1000;
        let sub = 256;
        let w = NoiseStreams::new(21).measurement();
        let fine_dt = dt / sub as f64;
        let mut ens = NpwEnsemble::from_numbers(vec![99, 101]).unwrap();
        let mut p = [0.5, 0.5];
        let mut worst: f64 = 0.0;
        for k in 0..steps {
            let mut dw = 0.0;
            for j in 0..sub {
                let d = wiener_increment(&w, (k * sub + j) as u64, fine_dt).unwrap();
                dw += d;
                let mean = 99.0 * p[0] + 101.0 * p[1];
                let p0 = p[0] + 2.0 * gamma.sqrt() * (99.0 - mean) * p[0] * d;
                let p1 = p[1] + 2.0 * gamma.sqrt() * (101.0 - mean) * p[1] * d;
                p = [p0 / (p0 + p1), p1 / (p0 + p1)];
            }
            step_npw(
                &mut ens,
                dw,
                &[0.0, 0.0],
                dt,
                gamma,
                NpwNoiseCoefficient::DerivedTwo,
            )
            .unwrap();
            let pn = ens.number_distribution(101).unwrap();
            worst = worst.max((pn[101] - p[1]).abs());
        }
        assert!(worst < 0.02, "max |p_101 - exact| = {worst}");
    }

    #[test]
    fn rescale_invariance() {
        let streams = NoiseStreams::new(8);
        let mut ens = init_npw_coherent(10.0, 0.0, 400, &streams)
            .unwrap()
            .with_replicas(4)
            .unwrap();
        let dv: Vec<f64> = (0..400).map(|i| 0.01 * ((i % 17) as f64 - 8.0)).collect();
        for k in 0..30 {
            step_npw(
                &mut ens,
                0.01 * (k as f64).sin(),
                &dv,
                1e-3,
                1.0,
                NpwNoiseCoefficient::DerivedTwo,
            )
            .unwrap();
        }
        let mut scaled = ens.clone();
        scaled.log_weight.iter_mut().for_each(|l| *l += 1e3f64.ln());
        let (a, b) = (
            npw_mean_number(&ens).unwrap(),
            npw_mean_number(&scaled).unwrap(),
        );
        assert!((a - b).abs() <= 1e-12 * a);
        let ea = stats::effective_sample_size(&ens.normalized_weights());
        let eb = stats::effective_sample_size(&scaled.normalized_weights());
        assert!((ea - eb).abs() <= 1e-9 * ea);
        let (sa, sb) = (
            npw_phase_spread(&ens).unwrap(),
            npw_phase_spread(&scaled).unwrap(),
        );
        assert!((sa - sb).abs() <= 1e-12 * sa.max(1e-300));
    }

    #[test]
    fn log_weights_stay_bounded() {
        let streams = NoiseStreams::new(2);
        let mut ens = init_npw_coherent(10.0, 0.0, 200, &streams).unwrap();
        let w = streams.measurement();
        let dv = vec![0.0; 200];
        for k in 0..3000 {
            let dw = wiener_increment(&w, k, 1e-3).unwrap();
            step_npw(
                &mut ens,
                dw,
                &dv,
                1e-3,
                1.0,
                NpwNoiseCoefficient::DerivedTwo,
            )
            .unwrap();
        }
        assert!(ens.weight_sum().is_finite() && ens.weight_sum() > 0.0);
        assert!(ens.normalized_weights().iter().all(|&w| w >= 0.0));
        assert!(npw_mean_number(&ens).unwrap().is_finite());
    }
}
