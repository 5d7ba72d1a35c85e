//! `nepadd` command line: corpus generation, teacher pretraining, detector
//! training, evaluation, the lambda sweep and the forgery-level study.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.

mod commands;
mod svg;

use clap::{Parser, Subcommand};
use nepadd_core::Error;

#[derive(Parser)]
#[command(name = "nepadd", version, about = "Partial audio deepfake detection with named-entity attention aggregation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic entity-annotated, partially spoofed corpus
    GenData(commands::gen_data::Args),
    /// Pretrain the entity-recognition teacher and save its checkpoint
    PretrainNer(commands::pretrain::Args),
    /// Train the detector (aggregation mode none, af or at)
    Train(commands::train::Args),
    /// Evaluate a checkpoint and report frame-level EER
    Eval(commands::eval::Args),
    /// Train and evaluate the transfer mode over a lambda grid
    SweepLambda(commands::sweep::Args),
    /// Train and evaluate per forgery level (1..10 spoof segments)
    ForgeryStudy(commands::forgery::Args),
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dim(_) => 2,
        Error::Data(_) | Error::Io(_) | Error::Metric(_) => 3,
        Error::Numeric(_) | Error::Domain(_) => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => commands::gen_data::run(args),
        Command::PretrainNer(args) => commands::pretrain::run(args),
        Command::Train(args) => commands::train::run(args),
        Command::Eval(args) => commands::eval::run(args),
        Command::SweepLambda(args) => commands::sweep::run(args),
        Command::ForgeryStudy(args) => commands::forgery::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
