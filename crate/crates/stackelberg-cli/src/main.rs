//! `stackelberg` — command-line front end for the equilibrium solvers.
//!
//! One process performs one run.  Every run reads (or generates) a TOML
//! problem config, resolves the flag overrides, and writes an output
//! directory containing `resolved-config.toml`, `report.json`, and — for
//! solve routes — `trajectories.csv` (plus `scenarios.csv` behind the
//! config's `output.raw_scenarios` flag).  Re-running the echoed config
//! reproduces every reported number bitwise; only the wall clock differs.
//!
//! Exit status: `0` success; `2` the config is malformed (nothing is
//! written); `3` the numerics failed or a verification did not hold (the
//! diagnostic report is still written); `1` filesystem trouble.

mod config;
mod presets;
mod report;
mod run;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{Overrides, ProblemConfig};
use crate::presets::{finance_preset, FinanceParams, FinancePreset};
use crate::run::{run, Action, Failure};

/// Open-loop Stackelberg equilibria of backward LQ stochastic games.
#[derive(Debug, Parser)]
#[command(name = "stackelberg", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the config's solver route; write report and trajectories.
    Solve {
        /// Path to the problem config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate every certificate for the configured instance (no solve).
    Certify {
        /// Path to the problem config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Solve, then verify against the exact discrete bilevel oracle.
    OracleCompare {
        /// Path to the problem config (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Generate and run a quadratic-hedging instance (no config needed).
    FinanceDemo {
        /// Constraint regime: pointwise (K = ℝ₊), affine (expected
        /// benchmark), or both.
        #[arg(long, value_enum, default_value_t = FinancePreset::Affine)]
        preset: FinancePreset,
        /// Riskless rate r.
        #[arg(long, default_value_t = 0.02)]
        rate: f64,
        /// Risky drift μ (must exceed the rate).
        #[arg(long, default_value_t = 0.07)]
        mu: f64,
        /// Volatility σ > 0.
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        /// Benchmark level β of the affine constraint.
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        /// Horizon T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[command(flatten)]
        common: Common,
    },
}

/// Flag overrides shared by every subcommand.
#[derive(Debug, Args)]
struct Common {
    /// Output directory (overrides the config's `output.directory`).
    #[arg(long)]
    out: Option<String>,
    /// Ensemble seed (switches a degenerate ensemble to Monte Carlo).
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario count (switches to Monte Carlo).
    #[arg(long)]
    scenarios: Option<usize>,
    /// Grid steps.
    #[arg(long)]
    grid: Option<usize>,
    /// Fixed-point (Picard) tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Attempt fixed-point routes even when the sufficient
    /// wellposedness/convexity gate refuses the instance.
    #[arg(long)]
    override_certificate: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            out: self.out.clone(),
            seed: self.seed,
            scenarios: self.scenarios,
            grid: self.grid,
            tol: self.tol,
            override_certificate: self.override_certificate,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("stackelberg: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Solve { config, common } => {
            let cfg = load_config(&config)?;
            run(Action::Solve, "solve", cfg, &common.overrides())
        }
        Command::Certify { config, common } => {
            let cfg = load_config(&config)?;
            run(Action::Certify, "certify", cfg, &common.overrides())
        }
        Command::OracleCompare { config, common } => {
            let cfg = load_config(&config)?;
            run(Action::OracleCompare, "oracle-compare", cfg, &common.overrides())
        }
        Command::FinanceDemo {
            preset,
            rate,
            mu,
            sigma,
            beta,
            horizon,
            common,
        } => {
            let params = FinanceParams {
                rate: vec![rate],
                mu: vec![mu],
                sigma: vec![sigma],
                beta,
                horizon,
                ..FinanceParams::default()
            };
            let cfg = finance_preset(preset, &params).map_err(|e| Failure::Schema(e.0))?;
            run(Action::Solve, "finance-demo", cfg, &common.overrides())
        }
    }
}

/// Reads and parses a config file; both failures are schema-stage (exit 2).
fn load_config(path: &PathBuf) -> Result<ProblemConfig, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Schema(format!("cannot read config {}: {e}", path.display())))?;
    ProblemConfig::from_toml(&text).map_err(|e| Failure::Schema(e.0))
}
