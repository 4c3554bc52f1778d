//! Batch front-end for `bufstab`: reads a run configuration, dispatches one
//! analysis and writes deterministic JSON reports and CSV tables.
//!
//! Exit codes: `0` the analysis completed (whatever its scientific outcome),
//! `1` the analysis could not run, `2` the configuration is invalid.

pub mod commands;
pub mod config;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    /// Malformed or inconsistent configuration (exit 2).
    Config(String),
    /// The analysis could not run (exit 1).
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Run(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "bufstab", version, about = "Stability analysis of finite-buffer network fluid models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the network description and print the validation report.
    Validate(CommonArgs),
    /// Integrate the queue dynamics and write the trajectory.
    Simulate(CommonArgs),
    /// Condition scan, equilibrium search, Jacobian checks and box certificates.
    Analyze(CommonArgs),
    /// Bisection on one commodity's arrival rate for the existence threshold.
    Sweep(CommonArgs),
    /// Closed-form admissible ranges for one-hop shared-buffer systems.
    Casestudy(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML, or JSON with a `.json` extension).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory for reports and tables.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Seed for randomized sampling (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Integration horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Integration step.
    #[arg(long)]
    pub step: Option<f64>,
    /// Number of condition-scan samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Sweep interval as `LO:HI`.
    #[arg(long, value_parser = parse_bracket)]
    pub bracket: Option<(f64, f64)>,
    /// Commodity id to sweep.
    #[arg(long)]
    pub commodity: Option<String>,
}

fn parse_bracket(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LO:HI")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad LO: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad HI: {e}"))?;
    Ok((lo, hi))
}

/// Runs one command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Validate(a) => commands::validate(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Casestudy(a) => commands::casestudy(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
