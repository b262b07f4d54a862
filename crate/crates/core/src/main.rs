use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use npwsim::oracle::MasterScheme;
use npwsim::run::{self, Method, RunOptions};
use npwsim::{Error, NpwNoiseCoefficient, SimulationConfig};

/// Worker-thread override; falls back to rayon's own RAYON_NUM_THREADS.
const THREADS_ENV: &str = "NPWSIM_THREADS";

#[derive(Parser)]
#[command(
    name = "npwsim",
    version,
    about = "Number-measurement conditional master equation: exact filter, positive-P and number-phase Wigner ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Exact-filter time stepper: propagator, milstein, midpoint or euler.
    #[arg(long, default_value = "propagator")]
    oracle_scheme: String,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the exact Fock-basis filter.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one method and write its time series.
    Run {
        #[arg(long)]
        method: Method,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        npw_coefficient: Option<NpwNoiseCoefficient>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all methods on one measurement record and merge their channels.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        npw_coefficient: Option<NpwNoiseCoefficient>,
        /// Leave the positive-P ensemble out; its columns stay empty.
        #[arg(long)]
        skip_pplus: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Quick reduced-scale invariant checks.
    Selftest,
}

fn load(
    common: &Common,
    coefficient: Option<NpwNoiseCoefficient>,
) -> Result<(SimulationConfig, RunOptions), Error> {
    let cfg = match &common.config {
        Some(path) => SimulationConfig::load(path)?,
        None => SimulationConfig::default(),
    };
    let cfg = run::with_overrides(cfg, common.seed, coefficient)?;
    let opts = RunOptions {
        oracle_scheme: MasterScheme::parse(&common.oracle_scheme, cfg.midpoint_iterations)?,
        skip_pplus: false,
    };
    Ok((cfg, opts))
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().map_err(|_| {
            Error::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool, Error> {
    configure_threads()?;
    match cli.command {
        Command::Oracle { common, out } => {
            let (cfg, opts) = load(&common, None)?;
            run::run_simulation(&cfg, Method::Oracle, &opts, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Run {
            method,
            common,
            npw_coefficient,
            out,
        } => {
            let (cfg, opts) = load(&common, npw_coefficient)?;
            let manifest = run::run_simulation(&cfg, method, &opts, &out)?;
            println!("wrote {}", out.display());
            for (m, status) in &manifest.divergence {
                if let (Some(t), Some(c)) = (status.time, status.cause) {
                    println!("{m} diverged at t = {t} ({c})");
                }
            }
        }
        Command::Compare {
            common,
            npw_coefficient,
            skip_pplus,
            out_dir,
        } => {
            let (cfg, mut opts) = load(&common, npw_coefficient)?;
            opts.skip_pplus = skip_pplus;
            let manifest = run::run_compare(&cfg, &opts, &out_dir)?;
            println!("wrote {}", out_dir.join("compare.csv").display());
            for (m, status) in &manifest.divergence {
                match (status.time, status.cause) {
                    (Some(t), Some(c)) => println!("{m} diverged at t = {t} ({c})"),
                    _ => println!("{m} converged through t = {}", cfg.t_final),
                }
            }
        }
        Command::Selftest => {
            let checks = run::selftest()?;
            let mut ok = true;
            for c in &checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                if c.detail.is_empty() {
                    println!("{tag} {}", c.name);
                } else {
                    println!("{tag} {} ({})", c.name, c.detail);
                }
                ok &= c.passed;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Usage(_) | Error::Json(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
