//! Drivers that evolve each method over the shared measurement record, plus
//! CSV and manifest output.
//!
//! All three methods read the same `dW_k` from the measurement stream, and
//! the fictitious noises are keyed by trajectory index, so switching a method
//! on or off never perturbs the others.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{NpwNoiseCoefficient, SimulationConfig};
use crate::error::{Error, Result};
use crate::noise::{NoiseStreams, StreamTag};
use crate::npw::{self, NpwEnsemble};
use crate::oracle::{self, MasterScheme, OracleSeries, Populations};
use crate::pplus::{self, PPlusEnsemble};
use crate::stats::{self, DivergenceStatus};

pub const VERSION: &str = concat!("npwsim-v", env!("CARGO_PKG_VERSION"));

/// Fictitious-noise draws per rayon task.
const NOISE_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Oracle,
    Pplus,
    Npw,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Pplus => "pplus",
            Method::Npw => "npw",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(Method::Oracle),
            "pplus" => Ok(Method::Pplus),
            "npw" => Ok(Method::Npw),
            other => Err(Error::Usage(format!(
                "unknown method `{other}` (oracle, pplus, npw)"
            ))),
        }
    }
}

/// Run-time choices that are not part of the physical configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub oracle_scheme: MasterScheme,
    /// Leave the positive-P solver out of `compare`.
    pub skip_pplus: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            oracle_scheme: MasterScheme::Propagator,
            skip_pplus: false,
        }
    }
}

/// `dW_1..=dW_steps` of the configured grid.
pub fn measurement_increments(cfg: &SimulationConfig) -> Result<Vec<f64>> {
    let grid = cfg.grid();
    NoiseStreams::new(cfg.seed).measurement_path(grid.steps, grid.dt)
}

fn fill_parallel(streams: &NoiseStreams, tag: StreamTag, step: usize, dt: f64, out: &mut [f64]) {
    out.par_chunks_mut(NOISE_CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| streams.fill_fictitious(tag, c * NOISE_CHUNK, step, dt, chunk));
}

/// Exact filter along the configured record. `full` evolves the whole density
/// matrix (purity available); otherwise only the diagonal.
pub fn run_oracle(
    cfg: &SimulationConfig,
    scheme: MasterScheme,
    full: bool,
) -> Result<OracleSeries> {
    let dw = measurement_increments(cfg)?;
    let rho = oracle::init_coherent_density(cfg.alpha_amplitude, cfg.alpha_phase, cfg.fock_cutoff)?;
    let (dt, gamma, stride) = (cfg.dt, cfg.gamma, cfg.record_stride);
    if full {
        Ok(oracle::run_density_matrix(rho, &dw, dt, gamma, scheme, stride)?.1)
    } else {
        let p = Populations::from(&rho);
        Ok(oracle::run_populations(p, &dw, dt, gamma, scheme, stride)?.1)
    }
}

/// Recorded channels of a weighted ensemble. Values after the divergence flag
/// are kept here for diagnostics; writers blank them.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSeries {
    pub method: Method,
    pub steps: Vec<usize>,
    pub times: Vec<f64>,
    pub mean_n: Vec<f64>,
    /// NaN for real-weighted methods.
    pub mean_n_imag: Vec<f64>,
    pub precision: Vec<f64>,
    pub precision_imag: Vec<f64>,
    pub ess: Vec<f64>,
    /// NaN for methods without a phase variable.
    pub phase_spread: Vec<f64>,
    /// `|sum omega| / n_traj` in the stored normalisation.
    pub weight_sum: Vec<f64>,
    pub divergence: DivergenceStatus,
    /// Grid step at which `divergence` was flagged.
    pub diverged_step: Option<usize>,
}

impl EnsembleSeries {
    fn new(method: Method) -> Self {
        EnsembleSeries {
            method,
            steps: Vec::new(),
            times: Vec::new(),
            mean_n: Vec::new(),
            mean_n_imag: Vec::new(),
            precision: Vec::new(),
            precision_imag: Vec::new(),
            ess: Vec::new(),
            phase_spread: Vec::new(),
            weight_sum: Vec::new(),
            divergence: DivergenceStatus::converged(),
            diverged_step: None,
        }
    }

    fn observe_divergence(&mut self, status: DivergenceStatus, step: usize) {
        if !self.divergence.diverged() && status.diverged() {
            self.divergence = status;
            self.diverged_step = Some(step);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Row `i` was recorded before any divergence flag.
    pub fn is_valid(&self, i: usize) -> bool {
        self.diverged_step.is_none_or(|d| self.steps[i] < d)
    }

    /// Channel value, or NaN once diverged.
    pub fn masked(&self, channel: &[f64], i: usize) -> f64 {
        if self.is_valid(i) {
            channel[i]
        } else {
            f64::NAN
        }
    }

    /// Every channel equal bit for bit (NaN matches NaN).
    pub fn bit_identical(&self, other: &EnsembleSeries) -> bool {
        let same = |a: &[f64], b: &[f64]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        self.method == other.method
            && self.steps == other.steps
            && self.divergence == other.divergence
            && same(&self.times, &other.times)
            && same(&self.mean_n, &other.mean_n)
            && same(&self.mean_n_imag, &other.mean_n_imag)
            && same(&self.precision, &other.precision)
            && same(&self.precision_imag, &other.precision_imag)
            && same(&self.ess, &other.ess)
            && same(&self.phase_spread, &other.phase_spread)
            && same(&self.weight_sum, &other.weight_sum)
    }

    /// Index of the row recorded at step `step`.
    pub fn row_of_step(&self, step: usize) -> Option<usize> {
        self.steps.binary_search(&step).ok()
    }
}

fn imag_precision(batch_means: &[Complex64]) -> f64 {
    let im: Vec<f64> = batch_means.iter().map(|m| m.im).collect();
    stats::sample_stddev(&im) / (im.len() as f64).sqrt()
}

fn record_pplus(
    series: &mut EnsembleSeries,
    ens: &PPlusEnsemble,
    batch_count: usize,
    step: usize,
    t: f64,
) {
    let weights = ens.normalized_weights();
    let est = stats::batch_estimate(&ens.number_samples(), &weights, batch_count);
    let (value, precision, precision_imag) = match &est {
        Ok(e) => (e.value, e.precision, imag_precision(&e.batch_means)),
        Err(_) => (Complex64::new(f64::NAN, f64::NAN), f64::NAN, f64::NAN),
    };
    series.steps.push(step);
    series.times.push(t);
    series.mean_n.push(value.re);
    series.mean_n_imag.push(value.im);
    series.precision.push(precision);
    series.precision_imag.push(precision_imag);
    series.ess.push(stats::effective_sample_size(&weights));
    series.phase_spread.push(f64::NAN);
    series.weight_sum.push(ens.weight_sum_magnitude());
}

fn record_npw(
    series: &mut EnsembleSeries,
    ens: &NpwEnsemble,
    batch_count: usize,
    step: usize,
    t: f64,
) {
    let weights = ens.normalized_weights();
    let est = stats::batch_estimate(&ens.number_samples(), &weights, batch_count);
    let (value, precision) = match &est {
        Ok(e) => (e.value, e.precision),
        Err(_) => (f64::NAN, f64::NAN),
    };
    series.steps.push(step);
    series.times.push(t);
    series.mean_n.push(value);
    series.mean_n_imag.push(f64::NAN);
    series.precision.push(precision);
    series.precision_imag.push(f64::NAN);
    series.ess.push(stats::effective_sample_size(&weights));
    series
        .phase_spread
        .push(npw::npw_phase_spread(ens).unwrap_or(f64::NAN));
    series.weight_sum.push(ens.weight_sum());
}

fn is_recorded(step: usize, total: usize, stride: usize) -> bool {
    step.is_multiple_of(stride) || step == total
}

/// Positive-P ensemble along the configured record.
pub fn run_pplus(cfg: &SimulationConfig) -> Result<EnsembleSeries> {
    let grid = cfg.grid();
    let streams = NoiseStreams::new(cfg.seed);
    let dw = measurement_increments(cfg)?;
    let mut ens = pplus::init_pplus(cfg.alpha_amplitude, cfg.alpha_phase, cfg.n_traj)?
        .with_replicas(cfg.batch_count)?;
    let mut series = EnsembleSeries::new(Method::Pplus);
    series.observe_divergence(ens.divergence(cfg.ess_fraction_threshold, 0.0), 0);
    record_pplus(&mut series, &ens, cfg.batch_count, 0, 0.0);
    let mut dv1 = vec![0.0; cfg.n_traj];
    let mut dv2 = vec![0.0; cfg.n_traj];
    for (k, &w) in dw.iter().enumerate() {
        fill_parallel(&streams, StreamTag::Fictitious1, k, grid.dt, &mut dv1);
        fill_parallel(&streams, StreamTag::Fictitious2, k, grid.dt, &mut dv2);
        pplus::step_pplus(
            &mut ens,
            w,
            &dv1,
            &dv2,
            grid.dt,
            cfg.gamma,
            cfg.midpoint_iterations,
        )?;
        let step = k + 1;
        let t = grid.time(step);
        if !series.divergence.diverged() {
            series.observe_divergence(ens.divergence(cfg.ess_fraction_threshold, t), step);
        }
        if is_recorded(step, grid.steps, cfg.record_stride) {
            record_pplus(&mut series, &ens, cfg.batch_count, step, t);
        }
    }
    Ok(series)
}

/// Evolves a number-phase ensemble for `steps` steps of the configured record,
/// calling `observe` after initialisation and after every step.
pub fn evolve_npw<F>(cfg: &SimulationConfig, steps: usize, mut observe: F) -> Result<NpwEnsemble>
where
    F: FnMut(usize, &NpwEnsemble),
{
    let grid = cfg.grid();
    if steps > grid.steps {
        return Err(Error::Usage(format!(
            "requested {steps} steps but the grid has {}",
            grid.steps
        )));
    }
    let streams = NoiseStreams::new(cfg.seed);
    let dw = measurement_increments(cfg)?;
    let mut ens =
        npw::init_npw_coherent(cfg.alpha_amplitude, cfg.alpha_phase, cfg.n_traj, &streams)?
            .with_replicas(cfg.batch_count)?;
    observe(0, &ens);
    let mut dv1 = vec![0.0; cfg.n_traj];
    for (k, &w) in dw.iter().take(steps).enumerate() {
        fill_parallel(&streams, StreamTag::Fictitious1, k, grid.dt, &mut dv1);
        npw::step_npw(
            &mut ens,
            w,
            &dv1,
            grid.dt,
            cfg.gamma,
            cfg.npw_noise_coefficient,
        )?;
        observe(k + 1, &ens);
    }
    Ok(ens)
}

/// Number-phase ensemble along the configured record.
pub fn run_npw(cfg: &SimulationConfig) -> Result<EnsembleSeries> {
    let grid = cfg.grid();
    let mut series = EnsembleSeries::new(Method::Npw);
    evolve_npw(cfg, grid.steps, |step, ens| {
        let t = grid.time(step);
        if !series.divergence.diverged() {
            series.observe_divergence(ens.divergence(cfg.ess_fraction_threshold, t), step);
        }
        if is_recorded(step, grid.steps, cfg.record_stride) {
            record_npw(&mut series, ens, cfg.batch_count, step, t);
        }
    })?;
    Ok(series)
}

/// Every channel of one `compare` run on a common time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub oracle: OracleSeries,
    pub npw: EnsembleSeries,
    pub pplus: Option<EnsembleSeries>,
}

impl ComparisonReport {
    /// `|method - oracle|` per row; NaN where the method is missing.
    pub fn accuracy(&self, series: &EnsembleSeries) -> Vec<f64> {
        (0..series.len())
            .map(|i| (series.masked(&series.mean_n, i) - self.oracle.mean_n[i]).abs())
            .collect()
    }
}

/// Runs the exact filter (diagonal path), the number-phase ensemble and,
/// unless skipped, the positive-P ensemble on one record.
pub fn compare(
    cfg: &SimulationConfig,
    opts: &RunOptions,
) -> Result<(ComparisonReport, BTreeMap<Method, f64>)> {
    let mut durations = BTreeMap::new();
    let clock = Instant::now();
    let oracle_series = run_oracle(cfg, opts.oracle_scheme, false)?;
    durations.insert(Method::Oracle, clock.elapsed().as_secs_f64());
    let clock = Instant::now();
    let npw_series = run_npw(cfg)?;
    durations.insert(Method::Npw, clock.elapsed().as_secs_f64());
    let pplus_series = if opts.skip_pplus {
        None
    } else {
        let clock = Instant::now();
        let s = run_pplus(cfg)?;
        durations.insert(Method::Pplus, clock.elapsed().as_secs_f64());
        Some(s)
    };
    Ok((
        ComparisonReport {
            oracle: oracle_series,
            npw: npw_series,
            pplus: pplus_series,
        },
        durations,
    ))
}

fn cell(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(cell).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub const ORACLE_COLUMNS: [&str; 5] = ["t", "mean_n", "var_n", "trace_error", "purity"];
pub const PPLUS_COLUMNS: [&str; 7] = [
    "t",
    "mean_n",
    "mean_n_imag",
    "precision",
    "ess",
    "weight_sum_magnitude",
    "diverged_at",
];
pub const NPW_COLUMNS: [&str; 7] = [
    "t",
    "mean_n",
    "precision",
    "ess",
    "phase_spread",
    "weight_sum",
    "diverged_at",
];
pub const COMPARE_COLUMNS: [&str; 14] = [
    "t",
    "oracle_mean_n",
    "oracle_var_n",
    "npw_mean_n",
    "npw_precision",
    "npw_accuracy",
    "npw_ess",
    "npw_diverged_at",
    "pplus_mean_n",
    "pplus_mean_n_imag",
    "pplus_precision",
    "pplus_accuracy",
    "pplus_ess",
    "pplus_diverged_at",
];

pub fn write_oracle_csv(path: &Path, series: &OracleSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(ORACLE_COLUMNS)?;
    for i in 0..series.times.len() {
        w.write_record([
            cell(series.times[i]),
            cell(series.mean_n[i]),
            cell(series.var_n[i]),
            cell(series.trace_error[i]),
            cell(series.purity[i]),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// The divergence time on rows at or after the flag, empty before.
fn diverged_cell(series: &EnsembleSeries, i: usize) -> String {
    if series.is_valid(i) {
        String::new()
    } else {
        opt_cell(series.divergence.time)
    }
}

pub fn write_ensemble_csv(path: &Path, series: &EnsembleSeries) -> Result<()> {
    let mut w = csv_writer(path)?;
    let m = |ch: &[f64], i| cell(series.masked(ch, i));
    match series.method {
        Method::Pplus => {
            w.write_record(PPLUS_COLUMNS)?;
            for i in 0..series.len() {
                w.write_record([
                    cell(series.times[i]),
                    m(&series.mean_n, i),
                    m(&series.mean_n_imag, i),
                    m(&series.precision, i),
                    m(&series.ess, i),
                    m(&series.weight_sum, i),
                    diverged_cell(series, i),
                ])?;
            }
        }
        Method::Npw => {
            w.write_record(NPW_COLUMNS)?;
            for i in 0..series.len() {
                w.write_record([
                    cell(series.times[i]),
                    m(&series.mean_n, i),
                    m(&series.precision, i),
                    m(&series.ess, i),
                    m(&series.phase_spread, i),
                    m(&series.weight_sum, i),
                    diverged_cell(series, i),
                ])?;
            }
        }
        Method::Oracle => {
            return Err(Error::Usage(
                "the exact filter has no ensemble channels".into(),
            ))
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_compare_csv(path: &Path, report: &ComparisonReport) -> Result<()> {
    let rows = report.oracle.times.len();
    if report.npw.len() != rows || report.pplus.as_ref().is_some_and(|p| p.len() != rows) {
        return Err(Error::Usage(
            "compare channels are on different grids".into(),
        ));
    }
    let npw_acc = report.accuracy(&report.npw);
    let pplus_acc = report.pplus.as_ref().map(|p| report.accuracy(p));
    let mut w = csv_writer(path)?;
    w.write_record(COMPARE_COLUMNS)?;
    for i in 0..rows {
        let n = &report.npw;
        let mut row = vec![
            cell(report.oracle.times[i]),
            cell(report.oracle.mean_n[i]),
            cell(report.oracle.var_n[i]),
            cell(n.masked(&n.mean_n, i)),
            cell(n.masked(&n.precision, i)),
            cell(npw_acc[i]),
            cell(n.masked(&n.ess, i)),
            diverged_cell(n, i),
        ];
        match (&report.pplus, &pplus_acc) {
            (Some(p), Some(acc)) => row.extend([
                cell(p.masked(&p.mean_n, i)),
                cell(p.masked(&p.mean_n_imag, i)),
                cell(p.masked(&p.precision, i)),
                cell(acc[i]),
                cell(p.masked(&p.ess, i)),
                diverged_cell(p, i),
            ]),
            _ => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Sidecar description of one invocation.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub oracle_scheme: String,
    pub config: SimulationConfig,
    pub outputs: BTreeMap<String, PathBuf>,
    pub durations_s: BTreeMap<String, f64>,
    pub divergence: BTreeMap<String, DivergenceStatus>,
}

impl RunManifest {
    fn new(command: &str, cfg: &SimulationConfig, opts: &RunOptions) -> Self {
        RunManifest {
            version: VERSION.to_string(),
            command: command.to_string(),
            seed: cfg.seed,
            oracle_scheme: opts.oracle_scheme.name().to_string(),
            config: cfg.clone(),
            outputs: BTreeMap::new(),
            durations_s: BTreeMap::new(),
            divergence: BTreeMap::new(),
        }
    }

    /// Writes the manifest as pretty JSON after checking every listed output.
    pub fn write(&self, path: &Path) -> Result<()> {
        for out in self.outputs.values() {
            let len = std::fs::metadata(out).map_err(|e| Error::io(out, e))?.len();
            if len == 0 {
                return Err(Error::io(
                    out,
                    std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "empty output file"),
                ));
            }
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// `<dir>/<stem>.manifest.json` next to a CSV output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

/// Runs one method and writes its CSV to `out` plus a sidecar manifest.
pub fn run_simulation(
    cfg: &SimulationConfig,
    method: Method,
    opts: &RunOptions,
    out: &Path,
) -> Result<RunManifest> {
    ensure_parent(out)?;
    let mut manifest = RunManifest::new(method.as_str(), cfg, opts);
    let clock = Instant::now();
    match method {
        Method::Oracle => {
            let series = run_oracle(cfg, opts.oracle_scheme, true)?;
            write_oracle_csv(out, &series)?;
        }
        Method::Pplus | Method::Npw => {
            let series = if method == Method::Pplus {
                run_pplus(cfg)?
            } else {
                run_npw(cfg)?
            };
            write_ensemble_csv(out, &series)?;
            manifest
                .divergence
                .insert(method.to_string(), series.divergence);
        }
    }
    manifest
        .durations_s
        .insert(method.to_string(), clock.elapsed().as_secs_f64());
    manifest
        .outputs
        .insert(method.to_string(), out.to_path_buf());
    manifest.write(&manifest_path_for(out))?;
    Ok(manifest)
}

/// Runs [`compare`] and writes `compare.csv` and `manifest.json` into `out_dir`.
pub fn run_compare(
    cfg: &SimulationConfig,
    opts: &RunOptions,
    out_dir: &Path,
) -> Result<RunManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (report, durations) = compare(cfg, opts)?;
    let csv_path = out_dir.join("compare.csv");
    write_compare_csv(&csv_path, &report)?;
    let mut manifest = RunManifest::new("compare", cfg, opts);
    manifest.outputs.insert("compare".into(), csv_path);
    for (m, d) in durations {
        manifest.durations_s.insert(m.to_string(), d);
    }
    manifest
        .divergence
        .insert(Method::Npw.to_string(), report.npw.divergence);
    if let Some(p) = &report.pplus {
        manifest
            .divergence
            .insert(Method::Pplus.to_string(), p.divergence);
    }
    manifest.write(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Applies command-line overrides and revalidates.
pub fn with_overrides(
    cfg: SimulationConfig,
    seed: Option<u64>,
    coefficient: Option<NpwNoiseCoefficient>,
) -> Result<SimulationConfig> {
    let mut cfg = cfg;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(c) = coefficient {
        cfg.npw_noise_coefficient = c;
    }
    cfg.validate()
}

/// One quick invariant check.
#[derive(Debug, Clone)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> SelfCheck {
    SelfCheck {
        name,
        passed,
        detail,
    }
}

/// Reduced-scale invariant suite.
pub fn selftest() -> Result<Vec<SelfCheck>> {
    let mut out = Vec::new();

    let rho = oracle::init_coherent_density(10.0, 0.0, 200)?;
    let (m, v) = (oracle::mean_number(&rho), oracle::variance_number(&rho));
    out.push(check(
        "coherent_state_moments",
        (m - 100.0).abs() < 1e-6 && (v - 100.0).abs() < 1e-4,
        format!("mean {m}, variance {v}"),
    ));

    let mut fixed = oracle::DensityMatrix::number_state(5, 20)?;
    let before = fixed.clone();
    oracle::step_master_ito(&mut fixed, 0.7, 1e-3, 1.0)?;
    let moved = fixed
        .entries()
        .iter()
        .zip(before.entries())
        .any(|(a, b)| a != b);
    out.push(check("number_state_fixed_point", !moved, String::new()));

    let cfg = SimulationConfig {
        n_traj: 2000,
        t_final: 0.05,
        dt: 1e-4,
        record_stride: 50,
        ..Default::default()
    }
    .validate()?;
    let dw = measurement_increments(&cfg)?;
    let (_, series) = oracle::run_density_matrix(
        rho.clone(),
        &dw,
        cfg.dt,
        cfg.gamma,
        MasterScheme::Propagator,
        500,
    )?;
    let mut path_mean = vec![oracle::mean_number(&rho)];
    let mut r = Populations::from(&rho);
    for &w in &dw {
        oracle::step_master_propagator(&mut r, w, cfg.dt, cfg.gamma)?;
        path_mean.push(oracle::mean_number(&r));
    }
    let w_path: Vec<f64> = std::iter::once(0.0)
        .chain(dw.iter().scan(0.0, |acc, d| {
            *acc += d;
            Some(*acc)
        }))
        .collect();
    let record = oracle::reconstruct_record(&w_path, &path_mean, cfg.dt, cfg.gamma)?;
    let closed = oracle::closed_form_linear_solution(&rho, &record, cfg.t_final, cfg.gamma)?;
    let gap = (oracle::mean_number(&closed) - path_mean[path_mean.len() - 1]).abs();
    out.push(check(
        "propagator_matches_closed_form",
        gap < 1e-8,
        format!("|delta <n>| = {gap:e}"),
    ));
    out.push(check(
        "trace_and_hermiticity",
        series.trace_error.iter().all(|&e| e <= 1e-9) && series.max_hermiticity_error <= 1e-12,
        format!("max hermiticity error {:e}", series.max_hermiticity_error),
    ));

    let npw_series = run_npw(&cfg)?;
    let oracle_series = run_oracle(&cfg, MasterScheme::Propagator, false)?;
    let worst = (0..npw_series.len())
        .map(|i| {
            (npw_series.mean_n[i] - oracle_series.mean_n[i]).abs()
                / (3.0 * npw_series.precision[i]).max(1e-12)
        })
        .skip(1)
        .fold(0.0, f64::max);
    out.push(check(
        "npw_tracks_oracle",
        worst <= 1.0 && !npw_series.divergence.diverged(),
        format!("max accuracy / (3 precision) = {worst:.3}"),
    ));

    let again = run_npw(&cfg)?;
    out.push(check(
        "npw_deterministic",
        again.bit_identical(&npw_series),
        String::new(),
    ));

    let mut single = pplus::init_pplus(1.0, 0.0, 1)?;
    pplus::step_pplus(&mut single, 0.0, &[0.0], &[0.0], 1e-2, 2.0, 3)?;
    out.push(check(
        "pplus_single_trajectory_no_drift",
        single.omega()[0] == Complex64::new(1.0, 0.0)
            && single.alpha()[0] == Complex64::new(1.0, 0.0),
        String::new(),
    ));

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimulationConfig {
        SimulationConfig {
            n_traj: 200,
            batch_count: 10,
            t_final: 0.01,
            dt: 1e-3,
            record_stride: 3,
            ..Default::default()
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Oracle, Method::Pplus, Method::Npw] {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("wigner".parse::<Method>().is_err());
    }

    #[test]
    fn series_share_the_record_grid() {
        let cfg = small();
        let o = run_oracle(&cfg, MasterScheme::Propagator, false).unwrap();
        let n = run_npw(&cfg).unwrap();
        let p = run_pplus(&cfg).unwrap();
        assert_eq!(o.steps, vec![0, 3, 6, 9, 10]);
        assert_eq!(n.steps, o.steps);
        assert_eq!(p.steps, o.steps);
        assert!((p.mean_n[0] - 100.0).abs() < 1e-12);
        assert!((o.mean_n[0] - 100.0).abs() < 1e-6);
        assert!((n.mean_n[0] - 100.0).abs() <= 3.0 * n.precision[0]);
    }

    #[test]
    fn zero_gamma_keeps_mean_fixed() {
        let cfg = SimulationConfig {
            gamma: 0.0,
            ..small()
        };
        let o = run_oracle(&cfg, MasterScheme::Euler, true).unwrap();
        assert!(o.mean_n.iter().all(|m| (m - 100.0).abs() < 1e-6));
        let p = run_pplus(&cfg).unwrap();
        assert!(p.mean_n.iter().all(|&m| (m - 100.0).abs() < 1e-12));
        let n = run_npw(&cfg).unwrap();
        assert!(n.mean_n.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn masking_after_divergence() {
        let mut s = EnsembleSeries::new(Method::Npw);
        s.steps = vec![0, 10, 20, 30];
        s.times = vec![0.0, 0.1, 0.2, 0.3];
        s.mean_n = vec![1.0, 2.0, 3.0, 4.0];
        s.observe_divergence(
            DivergenceStatus::at(0.2, stats::DivergenceCause::EssCollapse),
            20,
        );
        assert!(s.is_valid(1));
        assert!(!s.is_valid(2));
        assert!(s.masked(&s.mean_n, 3).is_nan());
        assert_eq!(diverged_cell(&s, 0), "");
        assert_eq!(diverged_cell(&s, 3), "0.2");
    }

    #[test]
    fn cells_blank_non_finite() {
        assert_eq!(cell(f64::NAN), "");
        assert_eq!(cell(f64::INFINITY), "");
        assert_eq!(cell(100.0), "100");
        assert_eq!(cell(0.1), "0.1");
    }
}
