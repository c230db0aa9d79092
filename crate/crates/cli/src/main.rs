//! `seal` command-line driver.
//!
//! Every artifact-producing command writes `run_config.json` into its output
//! directory; `seal replay --config <file>` re-runs it.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O or missing file, 4 schema or schema
//! mismatch, 5 invalid argument or configuration, 6 malformed input file,
//! 7 numerical failure, 8 dimension mismatch.

mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;

use args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli.command, cli.verbose) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
