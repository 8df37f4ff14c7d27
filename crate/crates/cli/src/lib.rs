//! Batch command-line front end for `sqr-core`: CSV ingestion, fitting,
//! lambda selection, the copula pipeline, sampling, simulation and the solver
//! benchmark.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;

use args::{Cli, Command};
use commands::Status;
use error::Result;

pub fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Fit(a) => commands::cmd_fit(a),
        Command::Select(a) => commands::cmd_select(a),
        Command::Pipeline(a) => commands::cmd_pipeline(a),
        Command::Sample(a) => commands::cmd_sample(a),
        Command::Simulate(a) => commands::cmd_simulate(a),
        Command::Benchmark(a) => commands::cmd_benchmark(a),
    }
}

/// Runs a parsed command and maps the outcome to a process exit code,
/// reporting problems on stderr.
pub fn run_to_exit_code(cli: &Cli) -> i32 {
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(status)) => {
            if let Status::NotConverged(what) = &status {
                eprintln!("warning: not converged: {}", what.join("; "));
            }
            status.exit_code()
        }
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => {
            eprintln!("error: internal failure");
            3
        }
    }
}
