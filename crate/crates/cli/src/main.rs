//! `dfp`: generate models, run forward passes, decompose and attribute,
//! train probes and run the evaluation protocols from the command line.

mod args;
mod commands;
mod inputs;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use dfp::Error;

use args::{Cli, Command};

/// Exit status and machine-readable code for an engine error.
fn classify(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Usage(_) => (1, "usage"),
        Error::Config(_) => (2, "config"),
        Error::ArchiveFormat(_) => (2, "archive_format"),
        Error::Tokenize(_) => (2, "tokenize"),
        Error::Input(_) => (2, "input"),
        Error::Io(_) => (2, "io"),
        Error::Json(_) => (2, "json"),
        Error::Csv(_) => (2, "csv"),
        Error::NumericDomain(_) => (3, "numeric_domain"),
        Error::Consistency(_) => (3, "consistency"),
        Error::Training(_) => (3, "training"),
        Error::DegenerateSubspace(_) => (3, "degenerate_subspace"),
        Error::Intervention(_) => (3, "intervention"),
        Error::Evaluation(_) => (3, "evaluation"),
        Error::Budget { .. } => (3, "budget"),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", one_line(first.trim_start_matches("error: ")));
            return ExitCode::from(1);
        }
    };

    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(&a),
        Command::Forward(a) => commands::forward(&a),
        Command::Attribute(a) => commands::attribute(&a),
        Command::ProbeTrain(a) => commands::probe_train(&a),
        Command::Project(a) => commands::project(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (status, code) = classify(&e);
            eprintln!("error[{code}]: {}", one_line(&e.to_string()));
            ExitCode::from(status)
        }
    }
}
