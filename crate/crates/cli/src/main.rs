use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod input;

#[derive(Debug, Parser)]
#[command(name = "opteq", version, about = "Optimization-induced equilibrium networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolveMode {
    Picard,
    Sam,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run property suites and print every check with its measured value.
    Verify {
        #[arg(default_value = "all", value_parser = suite_names())]
        suite: String,
    },
    /// Train the model described by a JSON config.
    Train { config: PathBuf },
    /// Solve for the equilibrium of a checkpointed model at one input.
    Solve {
        checkpoint: PathBuf,
        /// Comma-separated numbers, or a file holding a JSON array or
        /// whitespace/comma-separated numbers.
        input: String,
        #[arg(long, value_enum, default_value = "picard")]
        mode: SolveMode,
        /// Picard stopping tolerance on the relative residual.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        /// Picard iteration cap.
        #[arg(long, default_value_t = 10_000)]
        max_iter: usize,
        /// SAM steps.
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        /// SAM regularizer as JSON.
        #[arg(long, default_value = r#"{"kind":"squared_l2","lambda":1.0}"#)]
        reg: String,
        /// Overrides the SAM step-size scale.
        #[arg(long)]
        eta: Option<f64>,
        /// Write the per-iteration residuals as CSV.
        #[arg(long, value_name = "CSV")]
        emit_trajectory: Option<PathBuf>,
    },
    /// Rewrite the checkpoint's weight chain through factors of a common width.
    Factorize {
        checkpoint: PathBuf,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn suite_names() -> PossibleValuesParser {
    let mut names = vec!["all"];
    names.extend(opteq_core::verify::SUITES);
    PossibleValuesParser::new(names)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Verify { suite } => commands::verify(&suite),
        Command::Train { config } => commands::train(&config),
        Command::Solve {
            checkpoint,
            input,
            mode,
            tol,
            max_iter,
            steps,
            reg,
            eta,
            emit_trajectory,
        } => commands::solve(&commands::SolveArgs {
            checkpoint,
            input,
            mode,
            tol,
            max_iter,
            steps,
            reg,
            eta,
            trajectory: emit_trajectory,
        }),
        Command::Factorize { checkpoint, width, seed } => commands::factorize(&checkpoint, width, seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
