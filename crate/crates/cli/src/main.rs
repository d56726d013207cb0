//! `saasr`: single-binary driver for the speaker-attributed recognition
//! pipeline — synthetic dataset generation, two-stage training, decoding,
//! scoring, and a built-in self-test of the oracle-checked algorithms.

mod common;
mod decode;
mod gen;
mod score;
mod selftest;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "saasr", version, about = "Speaker-attributed multi-talker recognition pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset: train/dev/test splits, inventory, manifest.
    Gen(gen::GenArgs),
    /// Train one stage and write a checkpoint plus a CSV loss trace.
    Train(train::TrainArgs),
    /// Decode a dataset with a checkpoint, one JSON result per sample.
    Decode(decode::DecodeArgs),
    /// Score decode output against its reference dataset.
    Score(score::ScoreArgs),
    /// Run the oracle-equivalence suites; nonzero exit on any failure.
    Selftest(selftest::SelftestArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Gen(args) => gen::run(&args),
        Command::Train(args) => train::run(&args),
        Command::Decode(args) => decode::run(&args),
        Command::Score(args) => score::run(&args),
        Command::Selftest(args) => selftest::run(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(common::exit_code(&err))
        }
    }
}
