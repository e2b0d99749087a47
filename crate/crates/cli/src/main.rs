//! `drnp`: simulation studies and estimation on user data.

mod config;
mod estimate;
mod simulate;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

/// Finite-population means from a non-probability sample and a reference survey.
#[derive(Debug, Parser)]
#[command(name = "drnp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a replicated simulation study and write a metrics table.
    Simulate(simulate::SimulateArgs),
    /// Estimate a population mean from combined CSV samples.
    Estimate(estimate::EstimateArgs),
}

/// Failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn partial(message: impl Into<String>) -> Self {
        Failure { code: EXIT_PARTIAL, message: message.into() }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(a),
        Command::Estimate(a) => estimate::run(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
