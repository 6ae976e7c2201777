//! Command-line interface for the graph recommender.
//!
//! Four subcommands cover the workflow: `stats` summarizes a dataset,
//! `train` fits models and writes checkpoints, `eval` scores a checkpoint
//! against its held-out split, and `experiment` runs the ablation, noise
//! robustness, degree-group, and hyperparameter-sweep protocols.
//!
//! Exit codes: 0 on success, 1 for usage errors, 2 for input or
//! configuration errors, 3 for numeric failures during training or
//! evaluation.

mod commands;
mod error;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Environment variable overriding the configured output directory.
pub const OUTPUT_DIR_VAR: &str = "IBREC_OUTPUT_DIR";

#[derive(Parser)]
#[command(name = "ibrec", version, about = "Self-supervised graph collaborative filtering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize an interaction dataset.
    Stats {
        /// Path to a whitespace-separated `user item` interaction file.
        path: PathBuf,
    },
    /// Train one model per configured seed and write checkpoints.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint against its held-out split.
    Eval {
        /// Checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an experiment protocol and write a report file.
    Experiment {
        /// Which protocol to run.
        #[arg(long)]
        protocol: Protocol,
        /// Run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Protocol {
    Ablation,
    Noise,
    Groups,
    HyperparamSweep,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Stats { path } => commands::stats(&path),
        Command::Train { config } => commands::train(&config),
        Command::Eval { checkpoint } => commands::eval(&checkpoint),
        Command::Experiment { protocol, config } => commands::experiment(protocol, &config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
