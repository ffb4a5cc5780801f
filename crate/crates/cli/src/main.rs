//! `lifecycle`: solve, simulate, calibrate and validate the closed-form
//! life-cycle consumption/investment policy described by a JSON config.
//!
//! Exit codes: 0 success, 1 failed validation checks, 2 configuration or
//! feasibility errors, 3 scenario parse errors.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Runtime;
use config::RunConfig;
use lifecycle_core::calibration::ModelVariant;
use lifecycle_core::Error as CoreError;
use output::config_hash;

#[derive(Parser)]
#[command(name = "lifecycle", version, about = "Life-cycle consumption and investment policy solver")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, default_value = "config.json")]
    config: PathBuf,

    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the optimal policy; write the split summary and expected curves.
    Solve,
    /// Simulate policy paths, or replay a price scenario CSV.
    Simulate {
        /// Number of Monte Carlo paths to record.
        #[arg(long)]
        paths: Option<usize>,
        /// Steps per path.
        #[arg(long)]
        steps: Option<usize>,
        /// Single-asset price scenario CSV with columns t,price.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Fit the preference parameters to target curves.
    Calibrate {
        /// Variant: full, a_const, b_const, both_const or crra_full.
        #[arg(long, default_value = "full")]
        variant: String,
        /// Target CSV with columns t,c_target,pi_target (default: bundled curves).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Run the invariant checks against the configured model.
    Validate,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error);
            ExitCode::from(failure.code)
        }
    }
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    fn scenario(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }

    fn runtime(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }
}

/// Feasibility and parameter problems are configuration-class failures.
fn classify(error: anyhow::Error) -> Failure {
    let is_config = error.downcast_ref::<CoreError>().is_some_and(|e| {
        matches!(
            e,
            CoreError::InfeasibleEndowment { .. }
                | CoreError::InfeasibleBudget { .. }
                | CoreError::BadDimension { .. }
                | CoreError::BadCurve(_)
                | CoreError::BadPreferences(_)
                | CoreError::BadCashflows(_)
                | CoreError::NonPositiveDefinite { .. }
                | CoreError::DriftBelowRiskFree { .. }
                | CoreError::NonPositiveRate(_)
        )
    });
    if is_config {
        Failure::config(error)
    } else {
        Failure::runtime(error)
    }
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let (mut config, raw) = RunConfig::load(&cli.config).map_err(Failure::config)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.out_dir));
    let runtime = Runtime {
        hash: config_hash(&raw),
        config,
        out_dir,
    };
    match cli.command {
        Command::Solve => {
            commands::cmd_solve(&runtime).map_err(classify)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate {
            paths,
            steps,
            scenario,
        } => {
            match &scenario {
                Some(file) => {
                    // Scenario problems get their own exit code; model and
                    // config problems keep theirs.
                    commands::cmd_simulate(&runtime, paths, steps, Some(file)).map_err(|e| {
                        match e.downcast_ref::<CoreError>() {
                            Some(CoreError::NonPositivePrice { .. })
                            | Some(CoreError::MultiAssetUnsupported(_)) => Failure::scenario(e),
                            Some(_) => classify(e),
                            None => Failure::scenario(e),
                        }
                    })?;
                }
                None => {
                    commands::cmd_simulate(&runtime, paths, steps, None).map_err(classify)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Calibrate { variant, target } => {
            let variant: ModelVariant = variant
                .parse()
                .map_err(|e: CoreError| Failure::config(e.into()))?;
            commands::cmd_calibrate(&runtime, variant, target.as_deref()).map_err(classify)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate => {
            let failures = commands::cmd_validate(&runtime).map_err(classify)?;
            if failures == 0 {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
    }
}
