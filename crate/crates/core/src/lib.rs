//! Number-monitored single-mode conditional master equation, solved three
//! ways on one shared measurement record: an exact Fock-basis filter, a
//! positive-P weighted ensemble and a number-phase Wigner weighted ensemble.

pub mod config;
pub mod error;
pub mod noise;
pub mod npw;
pub mod oracle;
pub mod pplus;
pub mod run;
pub mod stats;

pub use config::{validate_config, NpwNoiseCoefficient, SimulationConfig, TimeGrid};
pub use error::{Error, Result};
