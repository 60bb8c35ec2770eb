use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diffad_cli::commands::{self, DetectArgs, EvalArgs, ExperimentArgs, GenerateArgs, TrainArgs};
use diffad_cli::CliResult;

/// Diffusion-based anomaly detection for multivariate time series.
#[derive(Parser)]
#[command(name = "diffad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/val/test CSV plus metadata).
    Generate(GenerateArgs),
    /// Train a detector and score its validation and test splits.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint.
    Detect(DetectArgs),
    /// Compute metrics and curves from score files.
    Eval(EvalArgs),
    /// Run an experiment suite over models and seeds.
    Experiment(ExperimentArgs),
}

fn run(cli: Cli) -> CliResult<std::path::PathBuf> {
    match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Train(a) => commands::train(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Experiment(a) => commands::experiment(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
