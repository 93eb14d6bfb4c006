//! `ldgrad`: batch front end for structure diagnostics, evolution,
//! particle simulation and the diffusion example.
//!
//! Exit codes: 0 success, 2 input error, 3 structural refusal (no gradient
//! system), 4 runtime or statistical failure.

mod commands;
mod output;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(name = "ldgrad", version, about = "Large-deviation gradient structures for Markov chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detailed-balance check and gradient-structure diagnostics.
    Analyze(AnalyzeArgs),
    /// Integrate the linear equation and/or gradient flows.
    Evolve(EvolveArgs),
    /// Particle simulation and the tilted rate-versus-probability experiment.
    Simulate(SimulateArgs),
    /// Grid drift-diffusion: relaxation, decomposition and refinement.
    Diffusion(DiffusionArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvolveArgs {
    #[arg(long)]
    pub generator: PathBuf,
    /// Comma-separated initial distribution, or `pi`.
    #[arg(long)]
    pub rho0: String,
    #[arg(long = "T")]
    pub t_end: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    /// Comma-separated tags: linear, ldp, cosh_family, quadratic_family.
    #[arg(long, default_value = "linear,ldp")]
    pub structure: String,
    /// Seed for the family-normalization samples.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SimulateArgs {
    /// Experiment config (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct DiffusionArgs {
    /// Grid config (TOML or JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "T")]
    pub t_end: Option<f64>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    pub fn structural(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
    pub fn runtime(message: impl Into<String>) -> Self {
        Self { code: 4, message: message.into() }
    }
}

impl From<ldgrad::Error> for CliError {
    fn from(e: ldgrad::Error) -> Self {
        use ldgrad::Error as E;
        match &e {
            E::InvalidInput(_)
            | E::InvalidGenerator(_)
            | E::ReducibleChain { .. }
            | E::DegenerateInvariantMeasure { .. }
            | E::GridMismatch(_)
            | E::InfiniteEntropy { .. }
            | E::BoundaryPoint { .. } => Self::input(e.to_string()),
            E::NotGradientSystem { .. } | E::NotWeaklyReversible { .. } => Self::structural(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Analyze(a) => commands::analyze(a),
        Command::Evolve(a) => commands::evolve(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Diffusion(a) => commands::diffusion(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
