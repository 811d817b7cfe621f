//! `deepbekk` command-line tool: simulate panels, fit models, forecast,
//! backtest and compare, plus the gradient and bound checks.

mod checkpoint;
mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use deepbekk::ModelKind;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<deepbekk::Error> for CliError {
    fn from(e: deepbekk::Error) -> Self {
        use deepbekk::Error as E;
        match e {
            E::Argument(_) | E::Constraint(_) => CliError::Config(e.to_string()),
            E::Ingestion { .. } | E::Ordering { .. } | E::InsufficientData { .. } | E::Io(_) | E::Csv(_) => {
                CliError::Data(e.to_string())
            }
            E::NotPositiveDefinite { .. } | E::Numeric { .. } | E::Training { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "deepbekk", version, about = "LSTM-BEKK, Scalar BEKK and DCC covariance experiments")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a return panel and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/panel.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit models and write checkpoints, training logs and a summary.
    Fit {
        #[arg(long)]
        config: PathBuf,
        /// Restrict to these models (default: those in the config).
        #[arg(long = "model")]
        models: Vec<ModelKind>,
        /// Echo every epoch to stderr.
        #[arg(long, short)]
        verbose: bool,
    },
    /// Covariance forecasts over the test span and one step beyond.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minimum-variance and equal-weight backtests on the test span.
    Backtest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Test-NLL, t-test and model-confidence-set tables.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// Fit every configured model on random subpanels instead.
        #[arg(long)]
        repeated: bool,
    },
    /// Compare analytic gradients with finite differences on a small panel.
    GradCheck {
        #[arg(long = "model")]
        models: Vec<ModelKind>,
        #[arg(long, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Monte-Carlo check of the expected-norm bound on LSTM-BEKK covariances.
    TheoremCheck {
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 2000)]
        paths: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.05, 0.1])]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.8, 0.9])]
        b: Vec<f64>,
        #[arg(long, default_value_t = 1.0)]
        projection_scale: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, out } => commands::simulate(&config, out.as_deref()),
        Command::Fit { config, models, verbose } => commands::fit(&config, &models, verbose),
        Command::Forecast { config, checkpoint, out } => commands::forecast(&config, &checkpoint, out.as_deref()),
        Command::Backtest { config, checkpoints } => commands::backtest(&config, &checkpoints),
        Command::Compare {
            config,
            checkpoints,
            repeated,
        } => commands::compare(&config, &checkpoints, repeated),
        Command::GradCheck { models, n, t, seed, tol } => commands::grad_check(&models, n, t, seed, tol),
        Command::TheoremCheck {
            n,
            k,
            paths,
            seed,
            a,
            b,
            projection_scale,
            out,
        } => commands::theorem_check(n, k, paths, seed, &a, &b, projection_scale, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("config error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        pool = pool.num_threads(j);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker threads: {e}");
            return ExitCode::FAILURE;
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
