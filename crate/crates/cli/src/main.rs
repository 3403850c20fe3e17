//! `mzphase`: calibration, estimation scans, Fisher curves and posterior
//! progressions for a photon-counting Mach-Zehnder interferometer.
//!
//! Exit codes: 0 on success, 2 for bad configuration or usage, 3 when the
//! numerical pipeline fails (rank-deficient calibration, vanishing evidence
//! and similar), 1 when output cannot be written.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "mzphase", version, about = "Bayesian phase estimation with photon-counting detectors")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `plan.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print nothing but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit retrodictive weights to calibration runs.
    Calibrate,
    /// Repeat estimations at every phase of the plan.
    Scan {
        #[arg(long, value_enum)]
        kind: ScanKind,
    },
    /// Fisher information and Cramér-Rao bound over the phase grid.
    Fisher,
    /// Posterior after increasing numbers of pulses at one phase.
    Posterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScanKind {
    Bias,
    Sensitivity,
}

impl ScanKind {
    fn name(self) -> &'static str {
        match self {
            Self::Bias => "bias",
            Self::Sensitivity => "sensitivity",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] mzphase::Error),
    #[error("cannot write output: {0}")]
    Output(std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Config(_) | CliError::Core(_) => 2,
            CliError::Output(_) => 1,
        }
    }
}

pub struct Reporter {
    quiet: bool,
}

impl Reporter {
    pub fn line(&self, text: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", text.as_ref());
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli.config.ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut config = Config::load(&path)?;
    if let Some(seed) = cli.seed {
        config.plan.seed = seed;
    }
    let base = path.parent().map(PathBuf::from).unwrap_or_default();
    let setup = config.resolve(&base, cli.out_dir)?;
    let report = Reporter { quiet: cli.quiet };
    match cli.command {
        Command::Calibrate => commands::calibrate(&setup, &report),
        Command::Scan { kind } => commands::scan(&setup, kind, &report),
        Command::Fisher => commands::fisher(&setup, &report),
        Command::Posterior => commands::posterior(&setup, &report),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mzphase: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
