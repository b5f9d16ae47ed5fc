//! `mmnet`: synthesize data, train, evaluate, verify and benchmark the
//! sparse voxel network from one binary.

mod config;
mod run;

use std::process::ExitCode;

use clap::Parser;

use crate::config::Cli;

/// Successful run.
const EXIT_OK: u8 = 0;
/// A check ran and failed.
const EXIT_VERIFY: u8 = 1;
/// Bad flags, configuration, or input data.
const EXIT_USAGE: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run::dispatch(cli) {
        Ok(true) => ExitCode::from(EXIT_OK),
        Ok(false) => ExitCode::from(EXIT_VERIFY),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
