//! The `synthrad` command line: dataset preparation, training, sampling,
//! augmentation experiments and class-balance reports.

pub mod args;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

use std::ffi::OsString;

use clap::Parser;

pub use args::Cli;
pub use error::{CliError, CliResult};

pub fn run(cli: &Cli) -> CliResult<()> {
    use args::Command::*;
    match &cli.command {
        PrepareData(a) => commands::prepare_data(a),
        Train(a) => commands::train(a),
        Sample(a) => commands::sample(a),
        Experiment(a) => commands::experiment(a),
        ReportBalance(a) => commands::report_balance(a),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
