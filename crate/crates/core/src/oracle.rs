//! Exact benchmark: the number-measurement conditional master equation in a
//! truncated Fock basis.
//!
//! Because the measured operator `n` is diagonal, every scheme below acts on
//! the density matrix componentwise: `rho_mn <- F(m, n) rho_mn` with a real,
//! symmetric factor that depends on the state only through the number moments
//! of its diagonal. No matrix products are needed, and the diagonal evolves
//! autonomously, which gives the O(cutoff) [`Populations`] fast path.
//!
//! Ito form, `c = sqrt(gamma) n`:
//!
//! ```text
//! d rho_mn = -(gamma/2)(m-n)^2 rho_mn dt + sqrt(gamma)(m+n-2<n>) rho_mn dW
//! ```
//!
//! The equivalent linear (unnormalised) filter driven by the record
//! `dY = dW + 2 sqrt(gamma) <n> dt` is solved by
//!
//! ```text
//! rho_mn(t) ~ rho_mn(0) exp(-gamma (m^2 + n^2) t + sqrt(gamma) (m+n) Y_t)
//! ```
//!
//! which is used both as an analytic oracle ([`closed_form_linear_solution`])
//! and, one grid step at a time, as the [`MasterScheme::Propagator`].

use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::SimulationConfig;

/// Rows per rayon task when scaling a full density matrix.
const ROWS_PER_TASK: usize = 16;

/// Number moments of a (possibly unnormalised) diagonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NumberMoments {
    pub trace: f64,
    pub mean: f64,
    pub variance: f64,
}

impl NumberMoments {
    pub fn of(populations: &[f64]) -> Self {
        let mut s0 = 0.0;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for (n, &p) in populations.iter().enumerate() {
            let n = n as f64;
            s0 += p;
            s1 += n * p;
            s2 += n * n * p;
        }
        let mean = s1 / s0;
        NumberMoments {
            trace: s0,
            mean,
            variance: s2 / s0 - mean * mean,
        }
    }
}

/// State of the exact filter: anything that exposes its Fock diagonal and can
/// be rescaled entrywise by a real symmetric factor.
pub trait FockState: Clone + Send + Sync {
    fn cutoff(&self) -> usize;

    fn dim(&self) -> usize {
        self.cutoff() + 1
    }

    /// Diagonal `rho_nn` as reals.
    fn populations(&self) -> Vec<f64>;

    /// `rho_mn <- factor(m, n) * rho_mn` for every stored entry.
    fn scale_entries<F>(&mut self, factor: F)
    where
        F: Fn(usize, usize) -> f64 + Sync;

    /// Divides by the trace and restores exact Hermiticity.
    fn renormalize(&mut self, trace: f64);

    /// True when every stored entry is finite.
    fn all_finite(&self) -> bool;

    /// Steps taken so far.
    fn step_index(&self) -> usize;

    fn advance_step_index(&mut self);
}

/// Full truncated density matrix, row-major `rho[m * dim + n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim: usize,
    entries: Vec<Complex64>,
    step: usize,
}

impl DensityMatrix {
    pub fn zeros(cutoff: usize) -> Self {
        let dim = cutoff + 1;
        DensityMatrix {
            dim,
            entries: vec![Complex64::new(0.0, 0.0); dim * dim],
            step: 0,
        }
    }

    /// `|k><k|`.
    pub fn number_state(k: usize, cutoff: usize) -> Result<Self> {
        if k > cutoff {
            return Err(Error::Usage(format!(
                "number state {k} exceeds cutoff {cutoff}"
            )));
        }
        let mut rho = Self::zeros(cutoff);
        rho.set(k, k, Complex64::new(1.0, 0.0));
        Ok(rho)
    }

    /// Diagonal (fully dephased) state with the given populations.
    pub fn from_populations(populations: &[f64]) -> Result<Self> {
        if populations.is_empty() {
            return Err(Error::Usage("empty population vector".into()));
        }
        let mut rho = Self::zeros(populations.len() - 1);
        for (n, &p) in populations.iter().enumerate() {
            rho.set(n, n, Complex64::new(p, 0.0));
        }
        Ok(rho)
    }

    pub fn get(&self, m: usize, n: usize) -> Complex64 {
        self.entries[m * self.dim + n]
    }

    pub fn set(&mut self, m: usize, n: usize, v: Complex64) {
        self.entries[m * self.dim + n] = v;
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|n| self.get(n, n).re).sum()
    }

    /// `Tr rho^2 = sum |rho_mn|^2` for Hermitian `rho`.
    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    /// `max |rho_mn - conj(rho_nm)|`.
    pub fn hermiticity_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for m in 0..self.dim {
            for n in m..self.dim {
                worst = worst.max((self.get(m, n) - self.get(n, m).conj()).norm());
            }
        }
        worst
    }
}

impl FockState for DensityMatrix {
    fn cutoff(&self) -> usize {
        self.dim - 1
    }

    fn populations(&self) -> Vec<f64> {
        (0..self.dim).map(|n| self.get(n, n).re).collect()
    }

    fn scale_entries<F>(&mut self, factor: F)
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        let dim = self.dim;
        self.entries
            .par_chunks_mut(dim * ROWS_PER_TASK)
            .enumerate()
            .for_each(|(block, rows)| {
                for (r, row) in rows.chunks_mut(dim).enumerate() {
                    let m = block * ROWS_PER_TASK + r;
                    for (n, z) in row.iter_mut().enumerate() {
                        *z *= factor(m, n);
                    }
                }
            });
    }

    fn renormalize(&mut self, trace: f64) {
        // Division keeps a lone unit population exactly 1.
        let dim = self.dim;
        for m in 0..dim {
            let d = &mut self.entries[m * dim + m];
            *d = Complex64::new(d.re / trace, 0.0);
            for n in (m + 1)..dim {
                let upper = self.entries[m * dim + n];
                let lower = self.entries[n * dim + m];
                let h = (upper + lower.conj()) * 0.5 / trace;
                self.entries[m * dim + n] = h;
                self.entries[n * dim + m] = h.conj();
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.entries.iter().all(|z| z.is_finite())
    }

    fn step_index(&self) -> usize {
        self.step
    }

    fn advance_step_index(&mut self) {
        self.step += 1;
    }
}

/// Diagonal-only state. Exact for every number observable because the
/// diagonal never couples to coherences under number measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Populations {
    probs: Vec<f64>,
    step: usize,
}

impl Populations {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Usage("empty population vector".into()));
        }
        Ok(Populations { probs, step: 0 })
    }

    /// Normalised Poisson(`amplitude^2`) populations of a coherent state.
    pub fn coherent(amplitude: f64, cutoff: usize) -> Result<Self> {
        let amps = coherent_amplitudes(amplitude, 0.0, cutoff)?;
        let mut probs: Vec<f64> = amps.iter().map(|c| c.norm_sqr()).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

impl From<&DensityMatrix> for Populations {
    fn from(rho: &DensityMatrix) -> Self {
        Populations {
            probs: rho.populations(),
            step: rho.step,
        }
    }
}

impl FockState for Populations {
    fn cutoff(&self) -> usize {
        self.probs.len() - 1
    }

    fn populations(&self) -> Vec<f64> {
        self.probs.clone()
    }

    fn scale_entries<F>(&mut self, factor: F)
    where
        F: Fn(usize, usize) -> f64 + Sync,
    {
        for (n, p) in self.probs.iter_mut().enumerate() {
            *p *= factor(n, n);
        }
    }

    fn renormalize(&mut self, trace: f64) {
        self.probs.iter_mut().for_each(|p| *p /= trace);
    }

    fn all_finite(&self) -> bool {
        self.probs.iter().all(|p| p.is_finite())
    }

    fn step_index(&self) -> usize {
        self.step
    }

    fn advance_step_index(&mut self) {
        self.step += 1;
    }
}

fn ln_factorials(cutoff: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(cutoff + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=cutoff {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

/// `e^{-|a|^2/2} a^m / sqrt(m!)` for `m = 0..=cutoff`, computed in log space.
fn coherent_amplitudes(amplitude: f64, phase: f64, cutoff: usize) -> Result<Vec<Complex64>> {
    if !amplitude.is_finite() || amplitude < 0.0 {
        return Err(Error::Usage(format!(
            "coherent amplitude must be finite and >= 0, got {amplitude}"
        )));
    }
    let needed = SimulationConfig::min_fock_cutoff(amplitude);
    if (cutoff as f64) < needed {
        return Err(Error::config(
            "fock_cutoff",
            format!("{cutoff} cannot contain amplitude {amplitude}; need >= {needed}"),
        ));
    }
    if amplitude == 0.0 {
        let mut v = vec![Complex64::new(0.0, 0.0); cutoff + 1];
        v[0] = Complex64::new(1.0, 0.0);
        return Ok(v);
    }
    let lnf = ln_factorials(cutoff);
    let ln_a = amplitude.ln();
    Ok((0..=cutoff)
        .map(|m| {
            let ln_mod = -0.5 * amplitude * amplitude + m as f64 * ln_a - 0.5 * lnf[m];
            Complex64::from_polar(ln_mod.exp(), (m as f64 * phase) % (2.0 * PI))
        })
        .collect())
}

/// Coherent state `|a><a|`, `a = amplitude * e^{i phase}`, renormalised over the
/// truncated space.
pub fn init_coherent_density(amplitude: f64, phase: f64, cutoff: usize) -> Result<DensityMatrix> {
    let amps = coherent_amplitudes(amplitude, phase, cutoff)?;
    let norm: f64 = amps.iter().map(|c| c.norm_sqr()).sum();
    let mut rho = DensityMatrix::zeros(cutoff);
    for (m, cm) in amps.iter().enumerate() {
        for (n, cn) in amps.iter().enumerate() {
            rho.set(m, n, cm * cn.conj() / norm);
        }
    }
    for n in 0..rho.dim {
        let d = rho.get(n, n);
        rho.set(n, n, Complex64::new(d.re, 0.0));
    }
    Ok(rho)
}

pub fn mean_number<S: FockState>(rho: &S) -> f64 {
    NumberMoments::of(&rho.populations()).mean
}

pub fn variance_number<S: FockState>(rho: &S) -> f64 {
    NumberMoments::of(&rho.populations()).variance
}

/// Time-stepping scheme for the exact filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MasterScheme {
    /// Euler-Maruyama on the Ito form.
    Euler,
    /// Ito form plus the Milstein term `-gamma C[n] rho (dW^2 - dt)`.
    Milstein,
    /// Semi-implicit midpoint on the Stratonovich form with a fixed number of
    /// fixed-point iterations.
    Midpoint { iterations: usize },
    /// Exact one-step propagator of the linear filter, record increment
    /// `dW + 2 sqrt(gamma) <n> dt` frozen at the step start.
    Propagator,
}

impl MasterScheme {
    pub fn name(&self) -> &'static str {
        match self {
            MasterScheme::Euler => "euler",
            MasterScheme::Milstein => "milstein",
            MasterScheme::Midpoint { .. } => "midpoint",
            MasterScheme::Propagator => "propagator",
        }
    }

    pub fn parse(name: &str, midpoint_iterations: usize) -> Result<Self> {
        match name {
            "euler" => Ok(MasterScheme::Euler),
            "milstein" => Ok(MasterScheme::Milstein),
            "midpoint" => Ok(MasterScheme::Midpoint {
                iterations: midpoint_iterations,
            }),
            "propagator" => Ok(MasterScheme::Propagator),
            other => Err(Error::Usage(format!(
                "unknown oracle scheme `{other}` (euler, milstein, midpoint, propagator)"
            ))),
        }
    }
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Moments at the start of the step.
    pub moments: NumberMoments,
    /// Trace after the componentwise update, before renormalisation.
    pub trace_before_renorm: f64,
}

fn check_step(dt: f64, gamma: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Usage(format!("dt must be > 0, got {dt}")));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::Usage(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

fn finish_step<S: FockState>(rho: &mut S, moments: NumberMoments) -> Result<StepReport> {
    let step = rho.step_index();
    let trace: f64 = rho.populations().iter().sum();
    if !trace.is_finite() || trace <= 0.0 || !rho.all_finite() {
        return Err(Error::Blowup {
            step,
            detail: format!("trace {trace} after update"),
        });
    }
    rho.renormalize(trace);
    rho.advance_step_index();
    Ok(StepReport {
        moments,
        trace_before_renorm: trace,
    })
}

/// One Euler-Maruyama step of the Ito conditional master equation.
pub fn step_master_ito<S: FockState>(
    rho: &mut S,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> Result<StepReport> {
    check_step(dt, gamma)?;
    let mo = NumberMoments::of(&rho.populations());
    let sg = gamma.sqrt();
    rho.scale_entries(|m, n| {
        let (mf, nf) = (m as f64, n as f64);
        let d = mf - nf;
        1.0 - 0.5 * gamma * d * d * dt + sg * (mf + nf - 2.0 * mo.mean) * dw
    });
    finish_step(rho, mo)
}

/// One Milstein step of the Ito form. Strong order one: the noise is scalar.
pub fn step_master_milstein<S: FockState>(
    rho: &mut S,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> Result<StepReport> {
    check_step(dt, gamma)?;
    let mo = NumberMoments::of(&rho.populations());
    let sg = gamma.sqrt();
    let levy = dw * dw - dt;
    rho.scale_entries(|m, n| {
        let (mf, nf) = (m as f64, n as f64);
        let d = mf - nf;
        let h = mf + nf - 2.0 * mo.mean;
        1.0 - 0.5 * gamma * d * d * dt
            + sg * h * dw
            + 0.5 * gamma * (h * h - 4.0 * mo.variance) * levy
    });
    finish_step(rho, mo)
}

/// Componentwise Stratonovich drift-plus-noise coefficient at midpoint moments:
/// `gamma (D + C) dt + sqrt(gamma) H dW` for entry `(m, n)`.
fn stratonovich_increment(
    m: usize,
    n: usize,
    mid: &NumberMoments,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let d = mf - nf;
    let h = mf + nf - 2.0 * mid.mean;
    let dissipator = -0.5 * d * d;
    let correction = -0.5 * (h * h - 4.0 * mid.variance);
    gamma * (dissipator + correction) * dt + gamma.sqrt() * h * dw
}

/// One semi-implicit midpoint step of the Stratonovich form
/// `gamma D[n] rho dt + gamma C[n] rho dt + sqrt(gamma) H[n] rho o dW`.
///
/// The midpoint `rho_bar = rho + increment(rho_bar) rho_bar / 2` is found by
/// `iterations` fixed-point sweeps; then `rho <- 2 rho_bar - rho`.
pub fn step_master_stratonovich<S: FockState>(
    rho: &mut S,
    dw: f64,
    dt: f64,
    gamma: f64,
    iterations: usize,
) -> Result<StepReport> {
    check_step(dt, gamma)?;
    if iterations == 0 {
        return Err(Error::Usage("midpoint needs at least one iteration".into()));
    }
    let p0 = rho.populations();
    let start = NumberMoments::of(&p0);

    // Moments of each midpoint iterate, computed on the diagonal alone.
    let mut history = Vec::with_capacity(iterations);
    let mut bar = p0.clone();
    for _ in 0..iterations {
        let mid = NumberMoments::of(&bar);
        for (n, (b, &p)) in bar.iter_mut().zip(&p0).enumerate() {
            *b = p + 0.5 * stratonovich_increment(n, n, &mid, dw, dt, gamma) * *b;
        }
        history.push(mid);
    }

    // Every entry follows the same recursion with a real factor:
    // f_0 = 1, f_{j+1} = 1 + a_j f_j / 2, final factor 2 f_J - 1.
    rho.scale_entries(|m, n| {
        let mut f = 1.0;
        for mid in &history {
            f = 1.0 + 0.5 * stratonovich_increment(m, n, mid, dw, dt, gamma) * f;
        }
        2.0 * f - 1.0
    });
    finish_step(rho, start)
}

/// Log of the one-step (or whole-path) linear-filter factor for Fock number `k`:
/// `-gamma k^2 t + sqrt(gamma) k Y`.
fn linear_filter_exponent(k: usize, t: f64, y: f64, gamma: f64) -> f64 {
    let kf = k as f64;
    -gamma * kf * kf * t + gamma.sqrt() * kf * y
}

/// One step of the exact linear-filter propagator with frozen innovation mean.
pub fn step_master_propagator<S: FockState>(
    rho: &mut S,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> Result<StepReport> {
    check_step(dt, gamma)?;
    let p = rho.populations();
    let mo = NumberMoments::of(&p);
    let dy = dw + 2.0 * gamma.sqrt() * mo.mean * dt;
    let mut exps: Vec<f64> = (0..p.len())
        .map(|k| linear_filter_exponent(k, dt, dy, gamma))
        .collect();
    let shift = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    exps.iter_mut().for_each(|e| *e = (*e - shift).exp());
    rho.scale_entries(|m, n| exps[m] * exps[n]);
    finish_step(rho, mo)
}

/// Dispatches one step of `scheme`.
pub fn step_master<S: FockState>(
    rho: &mut S,
    scheme: MasterScheme,
    dw: f64,
    dt: f64,
    gamma: f64,
) -> Result<StepReport> {
    match scheme {
        MasterScheme::Euler => step_master_ito(rho, dw, dt, gamma),
        MasterScheme::Milstein => step_master_milstein(rho, dw, dt, gamma),
        MasterScheme::Midpoint { iterations } => {
            step_master_stratonovich(rho, dw, dt, gamma, iterations)
        }
        MasterScheme::Propagator => step_master_propagator(rho, dw, dt, gamma),
    }
}

/// Cumulative measurement record `Y_k` on a uniform grid, `Y_0 = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub dt: f64,
    pub y_values: Vec<f64>,
}

impl MeasurementRecord {
    pub fn steps(&self) -> usize {
        self.y_values.len().saturating_sub(1)
    }

    /// `Y(t)` for a grid time `t`.
    pub fn at(&self, t: f64) -> Result<f64> {
        let ratio = t / self.dt;
        let k = ratio.round();
        if k.is_nan() || k < 0.0 || (ratio - k).abs() > 1e-6 || k as usize >= self.y_values.len() {
            return Err(Error::Usage(format!(
                "t = {t} is not a grid time of this record (dt = {}, {} steps)",
                self.dt,
                self.steps()
            )));
        }
        Ok(self.y_values[k as usize])
    }
}

/// `Y_k = Y_{k-1} + (W_k - W_{k-1}) + 2 sqrt(gamma) <n>_{k-1} dt`.
///
/// `w_path` is the cumulative Wiener path (`W_0 = 0`) and `mean_n_path` the
/// filter mean on the same grid.
pub fn reconstruct_record(
    w_path: &[f64],
    mean_n_path: &[f64],
    dt: f64,
    gamma: f64,
) -> Result<MeasurementRecord> {
    if w_path.len() != mean_n_path.len() {
        return Err(Error::Usage(format!(
            "record reconstruction: {} W samples but {} means",
            w_path.len(),
            mean_n_path.len()
        )));
    }
    if w_path.is_empty() {
        return Err(Error::Usage("record reconstruction: empty path".into()));
    }
    let drift = 2.0 * gamma.sqrt() * dt;
    let mut y = Vec::with_capacity(w_path.len());
    y.push(0.0);
    for k in 1..w_path.len() {
        let prev = y[k - 1];
        y.push(prev + (w_path[k] - w_path[k - 1]) + drift * mean_n_path[k - 1]);
    }
    Ok(MeasurementRecord { dt, y_values: y })
}

/// Closed-form solution of the linear filter at grid time `t`, normalised.
/// Computed in log-magnitude with the largest diagonal exponent subtracted.
pub fn closed_form_linear_solution(
    rho0: &DensityMatrix,
    record: &MeasurementRecord,
    t: f64,
    gamma: f64,
) -> Result<DensityMatrix> {
    let y = record.at(t)?;
    let dim = rho0.dim;
    let l: Vec<f64> = (0..dim)
        .map(|k| linear_filter_exponent(k, t, y, gamma))
        .collect();
    let shift = (0..dim)
        .filter(|&k| rho0.get(k, k).re > 0.0)
        .map(|k| 0.5 * rho0.get(k, k).re.ln() + l[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out = DensityMatrix::zeros(dim - 1);
    for m in 0..dim {
        for n in 0..dim {
            let z = rho0.get(m, n);
            let r = z.norm();
            if r > 0.0 {
                let mag = (r.ln() + l[m] + l[n] - 2.0 * shift).exp();
                out.set(m, n, z / r * mag);
            }
        }
    }
    let trace = out.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::Blowup {
            step: 0,
            detail: format!("closed form trace {trace}"),
        });
    }
    out.renormalize(trace);
    out.step = record.at(t).map(|_| (t / record.dt).round() as usize)?;
    Ok(out)
}

/// Diagonal-only variant of [`closed_form_linear_solution`].
pub fn closed_form_populations(
    p0: &[f64],
    record: &MeasurementRecord,
    t: f64,
    gamma: f64,
) -> Result<Vec<f64>> {
    let y = record.at(t)?;
    let logs: Vec<f64> = p0
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if p > 0.0 {
                p.ln() + 2.0 * linear_filter_exponent(k, t, y, gamma)
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= s);
    Ok(out)
}

/// Recorded observables of an exact-filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSeries {
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub mean_n: Vec<f64>,
    pub var_n: Vec<f64>,
    /// `|Tr rho - 1|` after the step.
    pub trace_error: Vec<f64>,
    /// `Tr rho^2`; NaN for diagonal-only runs.
    pub purity: Vec<f64>,
    /// Largest `max |rho_mn - conj(rho_nm)|` seen on a recorded step.
    pub max_hermiticity_error: f64,
}

/// Integrates the exact filter over the increments `dw` and records every
/// `stride` steps (plus the last).
pub fn run_exact_filter<S, F>(
    mut rho: S,
    dw: &[f64],
    dt: f64,
    gamma: f64,
    scheme: MasterScheme,
    stride: usize,
    mut extra: F,
) -> Result<(S, OracleSeries)>
where
    S: FockState,
    F: FnMut(&S) -> (f64, f64),
{
    let stride = stride.max(1);
    let mut series = OracleSeries {
        steps: Vec::new(),
        times: Vec::new(),
        mean_n: Vec::new(),
        var_n: Vec::new(),
        trace_error: Vec::new(),
        purity: Vec::new(),
        max_hermiticity_error: 0.0,
    };
    let mut record = |rho: &S, k: usize, series: &mut OracleSeries| {
        let p = rho.populations();
        let mo = NumberMoments::of(&p);
        let (purity, herm) = extra(rho);
        series.steps.push(k);
        series.times.push(k as f64 * dt);
        series.mean_n.push(mo.mean);
        series.var_n.push(mo.variance);
        series.trace_error.push((mo.trace - 1.0).abs());
        series.purity.push(purity);
        if herm > series.max_hermiticity_error {
            series.max_hermiticity_error = herm;
        }
    };
    record(&rho, 0, &mut series);
    for (k, &w) in dw.iter().enumerate() {
        step_master(&mut rho, scheme, w, dt, gamma)?;
        let done = k + 1;
        if done % stride == 0 || done == dw.len() {
            record(&rho, done, &mut series);
        }
    }
    Ok((rho, series))
}

/// Full-matrix run recording purity and Hermiticity.
pub fn run_density_matrix(
    rho: DensityMatrix,
    dw: &[f64],
    dt: f64,
    gamma: f64,
    scheme: MasterScheme,
    stride: usize,
) -> Result<(DensityMatrix, OracleSeries)> {
    run_exact_filter(rho, dw, dt, gamma, scheme, stride, |r: &DensityMatrix| {
        (r.purity(), r.hermiticity_error())
    })
}

/// Diagonal fast-path run; purity is not tracked.
pub fn run_populations(
    p: Populations,
    dw: &[f64],
    dt: f64,
    gamma: f64,
    scheme: MasterScheme,
    stride: usize,
) -> Result<(Populations, OracleSeries)> {
    run_exact_filter(p, dw, dt, gamma, scheme, stride, |_| (f64::NAN, 0.0))
}
