//! Run configuration and time-grid bookkeeping.
//!
//! A [`SimulationConfig`] is immutable once validated and is shared read-only
//! by every solver. All times are dimensionless (units of the inverse
//! measurement strength scale used throughout the crate).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack used when snapping `t_final` onto the `dt` grid.
const GRID_TOLERANCE: f64 = 1e-9;

/// Multiplier `c` on the measurement-noise term of the number-phase weight
/// equation, `c * sqrt(gamma) * omega * n o dW`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NpwNoiseCoefficient {
    /// `c = 2`: obtained from the stochastic Fokker-Planck equation by dropping
    /// trajectory-independent terms. Reproduces the exact diagonal filter.
    #[default]
    DerivedTwo,
    /// `c = 1`: the coefficient as printed in the trajectory equations.
    PaperOne,
}

impl NpwNoiseCoefficient {
    pub fn value(self) -> f64 {
        match self {
            NpwNoiseCoefficient::DerivedTwo => 2.0,
            NpwNoiseCoefficient::PaperOne => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NpwNoiseCoefficient::DerivedTwo => "derived_two",
            NpwNoiseCoefficient::PaperOne => "paper_one",
        }
    }
}

impl fmt::Display for NpwNoiseCoefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NpwNoiseCoefficient {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "derived_two" => Ok(NpwNoiseCoefficient::DerivedTwo),
            "paper_one" => Ok(NpwNoiseCoefficient::PaperOne),
            other => Err(Error::config(
                "npw_noise_coefficient",
                format!("expected `derived_two` or `paper_one`, got `{other}`"),
            )),
        }
    }
}

/// All physical and numerical parameters of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Measurement strength.
    pub gamma: f64,
    /// Modulus of the initial coherent amplitude.
    pub alpha_amplitude: f64,
    /// Phase of the initial coherent amplitude, radians.
    pub alpha_phase: f64,
    pub n_traj: usize,
    pub dt: f64,
    pub t_final: f64,
    pub seed: u64,
    /// Highest retained Fock number of the exact filter.
    pub fock_cutoff: usize,
    /// Number of independent sub-ensembles used for the precision estimate.
    pub batch_count: usize,
    /// Divergence is declared once ESS drops below this fraction of `n_traj`.
    pub ess_fraction_threshold: f64,
    pub midpoint_iterations: usize,
    pub npw_noise_coefficient: NpwNoiseCoefficient,
    /// Output decimation: one CSV row every `record_stride` steps.
    pub record_stride: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            gamma: 1.0,
            alpha_amplitude: 10.0,
            alpha_phase: 0.0,
            n_traj: 10_000,
            dt: 1e-4,
            t_final: 0.5,
            seed: 1,
            fock_cutoff: 200,
            batch_count: 10,
            ess_fraction_threshold: 0.01,
            midpoint_iterations: 3,
            npw_noise_coefficient: NpwNoiseCoefficient::DerivedTwo,
            record_stride: 10,
        }
    }
}

impl SimulationConfig {
    /// Smallest cutoff that keeps the Poisson tail of the initial coherent
    /// state inside the truncated Fock space.
    pub fn min_fock_cutoff(amplitude: f64) -> f64 {
        amplitude * amplitude + 8.0 * amplitude
    }

    /// Checks every invariant and snaps `t_final` onto the `dt` grid.
    pub fn validate(mut self) -> Result<Self> {
        let finite_nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    field,
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        finite_nonneg("gamma", self.gamma)?;
        finite_nonneg("alpha_amplitude", self.alpha_amplitude)?;
        if !self.alpha_phase.is_finite() {
            return Err(Error::config("alpha_phase", "must be finite"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("dt", format!("must be > 0, got {}", self.dt)));
        }
        if !(self.t_final.is_finite() && self.t_final > 0.0) {
            return Err(Error::config(
                "t_final",
                format!("must be > 0, got {}", self.t_final),
            ));
        }
        if self.n_traj == 0 {
            return Err(Error::config("n_traj", "must be positive"));
        }
        if self.batch_count == 0 {
            return Err(Error::config("batch_count", "must be positive"));
        }
        if !self.n_traj.is_multiple_of(self.batch_count) {
            return Err(Error::config(
                "batch_count",
                format!(
                    "{} does not divide n_traj = {}",
                    self.batch_count, self.n_traj
                ),
            ));
        }
        if self.fock_cutoff == 0 {
            return Err(Error::config("fock_cutoff", "must be positive"));
        }
        let needed = Self::min_fock_cutoff(self.alpha_amplitude);
        if (self.fock_cutoff as f64) < needed {
            return Err(Error::config(
                "fock_cutoff",
                format!(
                    "{} cannot contain the Poisson tail of amplitude {}; need >= {needed}",
                    self.fock_cutoff, self.alpha_amplitude
                ),
            ));
        }
        if !(self.ess_fraction_threshold > 0.0 && self.ess_fraction_threshold <= 1.0) {
            return Err(Error::config(
                "ess_fraction_threshold",
                format!("must lie in (0, 1], got {}", self.ess_fraction_threshold),
            ));
        }
        if self.midpoint_iterations == 0 {
            return Err(Error::config("midpoint_iterations", "must be positive"));
        }
        if self.record_stride == 0 {
            return Err(Error::config("record_stride", "must be positive"));
        }

        let steps = grid_steps(self.t_final, self.dt);
        self.t_final = steps as f64 * self.dt;
        Ok(self)
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.dt, grid_steps(self.t_final, self.dt))
    }

    pub fn traj_per_batch(&self) -> usize {
        self.n_traj / self.batch_count
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads and validates a JSON config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)?.validate()
    }
}

/// Convenience wrapper for [`SimulationConfig::validate`].
pub fn validate_config(cfg: SimulationConfig) -> Result<SimulationConfig> {
    cfg.validate()
}

fn grid_steps(t_final: f64, dt: f64) -> usize {
    let ratio = t_final / dt;
    let nearest = ratio.round();
    let steps = if (ratio - nearest).abs() <= GRID_TOLERANCE * nearest.max(1.0) {
        nearest
    } else {
        ratio.ceil()
    };
    (steps as usize).max(1)
}

/// Uniform time grid `t_k = k * dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Self {
        TimeGrid { dt, steps }
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    pub fn t_final(&self) -> f64 {
        self.time(self.steps)
    }

    /// Step index nearest to `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }

    /// Steps at which a decimated series is recorded: 0, stride, 2*stride, ...
    /// plus the final step.
    pub fn recorded_steps(&self, stride: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..=self.steps).step_by(stride.max(1)).collect();
        if out.last() != Some(&self.steps) {
            out.push(self.steps);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = SimulationConfig::default().validate().unwrap();
        assert_eq!(cfg.grid().steps, 5000);
        assert_eq!(cfg.fock_cutoff, 200);
        assert_eq!(cfg.npw_noise_coefficient, NpwNoiseCoefficient::DerivedTwo);
    }

    #[test]
    fn tail_containment_rejected() {
        let cfg = SimulationConfig {
            fock_cutoff: 50,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "fock_cutoff"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn batch_divisibility_rejected() {
        let cfg = SimulationConfig {
            n_traj: 100,
            batch_count: 7,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "batch_count"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn t_final_snaps_onto_grid() {
        let cfg = SimulationConfig {
            dt: 0.03,
            t_final: 0.1,
            ..Default::default()
        }
        .validate()
        .unwrap();
        assert_eq!(cfg.grid().steps, 4);
        assert!((cfg.t_final - 0.12).abs() < 1e-15);

        // 0.5 / 1e-4 is 4999.999... in floating point; must not round up to 5001.
        let cfg = SimulationConfig::default().validate().unwrap();
        assert!((cfg.dt * cfg.grid().steps as f64 - 0.5).abs() <= 0.5e-9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = SimulationConfig::from_json_str(r#"{"gamma": 1.0, "gama": 2.0}"#);
        assert!(err.is_err());
        let ok = SimulationConfig::from_json_str(r#"{"gamma": 0.5}"#).unwrap();
        assert_eq!(ok.gamma, 0.5);
        assert_eq!(ok.n_traj, 10_000);
    }

    #[test]
    fn bad_scalars_name_their_field() {
        let cases: Vec<(SimulationConfig, &str)> = vec![
            (
                SimulationConfig {
                    dt: 0.0,
                    ..Default::default()
                },
                "dt",
            ),
            (
                SimulationConfig {
                    gamma: -1.0,
                    ..Default::default()
                },
                "gamma",
            ),
            (
                SimulationConfig {
                    n_traj: 0,
                    ..Default::default()
                },
                "n_traj",
            ),
            (
                SimulationConfig {
                    ess_fraction_threshold: 1.5,
                    ..Default::default()
                },
                "ess_fraction_threshold",
            ),
            (
                SimulationConfig {
                    record_stride: 0,
                    ..Default::default()
                },
                "record_stride",
            ),
        ];
        for (cfg, want) in cases {
            match cfg.validate() {
                Err(Error::Config { field, .. }) => assert_eq!(field, want),
                other => panic!("{want}: expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn recorded_steps_include_endpoints() {
        let g = TimeGrid::new(0.1, 7);
        assert_eq!(g.recorded_steps(3), vec![0, 3, 6, 7]);
        assert_eq!(g.recorded_steps(7), vec![0, 7]);
    }
}
