use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] latentwave::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use latentwave::Error as E;
        match self {
            CliError::Input(_) | CliError::Config(_) => 2,
            CliError::Model(E::NonFinite(_) | E::NotPositiveDefinite(_) | E::Initialization(_)) => 3,
            CliError::Model(_) => 2,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "latentwave", version, about = "Dynamic latent class regression for repeated surveys")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `paths.output`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Draw a synthetic dataset from a parameter document.
    Simulate,
    /// Sample the posterior and write draws, diagnostics and summaries.
    Fit,
    /// Population-proportion trajectories from stored draws.
    Predict,
    /// Cross-validated accuracy over a grid of profile counts.
    Cv,
    /// Convergence and label-switching diagnostics of stored draws.
    Diagnose,
    /// Profile tables and covariate effects of stored draws.
    Summarize,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Cv => "cv",
            Command::Diagnose => "diagnose",
            Command::Summarize => "summarize",
        }
    }
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let mut config = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.global.out {
        config.paths.output = Some(out.clone());
    }
    config.validate()?;
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    commands::dispatch(cli.command, &config, cli.global.force)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
