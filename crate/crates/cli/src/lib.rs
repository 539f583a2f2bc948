//! Command-line pipeline: scene generation, oracle extraction, predictor
//! training, threshold search, evaluation and reporting.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config hash mismatch in {path}: artifact has {found}, this config expects {expected}")]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] objprune::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::HashMismatch { .. } => 2,
            CliError::Core(objprune::Error::InvalidConfig(_)) => 2,
            CliError::MissingArtifact(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "objprune", version, about = "Object-level visual token pruning pipeline")]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config leaf, e.g. `--set gap.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train/val/test scenes as JSON lines.
    Gen,
    /// Run the planted teacher and write oracle importance maps.
    Extract {
        /// Also dump the attention stacks of the first N training scenes.
        #[arg(long, value_name = "N", default_value_t = 0)]
        dump_stacks: usize,
    },
    /// Train the importance predictor.
    Train,
    /// Search threshold scales on the validation split.
    Search,
    /// Evaluate all pruning arms on the test split.
    Eval,
    /// Summarize the evaluation as a Markdown table.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

/// Parses `args` and runs one subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides, |k| std::env::var(k).ok())?;
    match &cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Extract { dump_stacks } => commands::extract(&cfg, *dump_stacks),
        Command::Train => commands::train(&cfg),
        Command::Search => commands::search(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Report => commands::report(&cfg),
        Command::Config => {
            let text = toml::to_string_pretty(&cfg).map_err(|e| CliError::Config(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}
