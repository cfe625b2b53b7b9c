//! `genb`: dataset generation, training, evaluation, ablations and reports.

mod ablate;
mod failure;
mod gen;
mod report;
mod svg;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "genb", version, about = "Generative bias debiasing on a synthetic inverted-prior VQA benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Gen(gen::GenArgs),
    /// Train the bias and target models; writes report.json, losses.csv,
    /// attention.csv and checkpoints.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint on both splits.
    Eval(train::EvalArgs),
    /// Run a manifest of variants over seeds and aggregate test accuracy.
    Ablate(ablate::AblateArgs),
    /// Compare finished runs in a markdown document with an OOD-gap chart.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Gen(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => train::eval(a),
        Command::Ablate(a) => ablate::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
