//! `diffreg`: synthetic data, per-pair and amortized registration, and
//! evaluation from the command line.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, invalid
//! settings, existing outputs), 2 for runtime or numeric failures.

mod commands;
mod config;
mod dataset;
mod output;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "diffreg",
    version,
    about = "Diffeomorphic registration with uncertainty"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic pairs with known deformations.
    Synth(commands::SynthArgs),
    /// Fit a posterior deformation to one pair or a dataset.
    Register(commands::RegisterArgs),
    /// Train the amortized registration network.
    Train(commands::TrainArgs),
    /// Register with a trained network.
    Apply(commands::ApplyArgs),
    /// Score registrations against ground-truth labels.
    Eval(commands::EvalArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Register(a) => commands::register(a),
        Command::Train(a) => commands::train(a),
        Command::Apply(a) => commands::apply(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(output::exit_code(&e))
        }
    }
}
