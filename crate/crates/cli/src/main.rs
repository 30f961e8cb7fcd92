//! `vecot`: command-line front end for the vecot-core library.
//!
//! Every run writes one JSON document (schema `vecot/1`) to standard output
//! or to `--output`. Exit codes: 0 success, 2 validation error, 3 solver hit
//! its iteration limit, 4 internal error.

mod args;
mod commands;
mod output;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;
use crate::output::CliError;

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("VECOT_THREADS") else {
        return Ok(());
    };
    match value.trim().parse::<usize>() {
        Ok(n) if n > 0 => {
            vecot_core::par::configure_threads(n);
            Ok(())
        }
        _ => Err(CliError::Usage(format!("VECOT_THREADS must be a positive integer, got {value:?}"))),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| commands::run(&cli));
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("vecot: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
