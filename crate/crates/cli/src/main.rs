//! `pean`: dataset generation, training, evaluation, CKA analysis and
//! single-image super-resolution.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "pean", version, about = "Prior-enhanced scene text image super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic LR/HR dataset.
    GenData(commands::GenDataArgs),
    /// Train the recognizer, pretrain or fine-tune the SR network.
    Train(commands::TrainArgs),
    /// Super-resolve the test split and score it with the frozen recognizer.
    Eval(commands::EvalArgs),
    /// Layer-wise linear CKA between two models or prior modes.
    Cka(commands::CkaArgs),
    /// Super-resolve one 16x64 PNG.
    Sr(commands::SrArgs),
}

/// Exit codes per failure class.
pub mod exit {
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const IO: u8 = 4;
    pub const CHECKPOINT: u8 = 5;
    pub const NUMERIC: u8 = 6;
    pub const OTHER: u8 = 1;
}

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<pean::Error>() {
            return match e {
                pean::Error::Io { .. } | pean::Error::Format { .. } => exit::IO,
                pean::Error::Checkpoint(_) | pean::Error::State(_) => exit::CHECKPOINT,
                pean::Error::NonFinite(_) => exit::NUMERIC,
                _ => exit::USAGE,
            };
        }
        if cause.downcast_ref::<commands::ConfigError>().is_some() {
            return exit::CONFIG;
        }
        if cause.downcast_ref::<commands::MissingPrerequisite>().is_some() {
            return exit::CHECKPOINT;
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return exit::CONFIG;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::OTHER
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenData(a) => commands::gen_data(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Cka(a) => commands::cka(a),
        Cmd::Sr(a) => commands::sr(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(classify(&e))
        }
    }
}

