//! `cpcx`: one binary wiring data preparation, pretraining, probing and
//! evaluation together.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};
use cpcx_core::Error;

use args::Cli;

const USAGE: u8 = 1;
const DATA: u8 = 2;
const NUMERICAL: u8 = 3;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => USAGE,
        Error::Numerical(_) => NUMERICAL,
        Error::Shape { .. }
        | Error::Data(_)
        | Error::ChecksumMismatch(_)
        | Error::UnknownVersion { .. }
        | Error::Truncated { .. }
        | Error::Format { .. }
        | Error::Io { .. } => DATA,
    }
}

fn main() -> ExitCode {
    let cmd = Cli::command();
    let argv = match config::inject(std::env::args_os().collect(), &cmd) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("cpcx: {msg}");
            return ExitCode::from(USAGE);
        }
    };
    let matches = match cmd.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(USAGE),
            };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(USAGE);
        }
    };
    if cli.threads == 0 {
        eprintln!("cpcx: --threads must be at least 1");
        return ExitCode::from(USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("cpcx: cannot start the thread pool: {e}");
        return ExitCode::from(USAGE);
    }
    let resolved = config::resolved(&cmd, &matches);
    eprint!("{resolved}");
    let name = cli.command.name();
    match commands::run(cli.command, &resolved) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cpcx {name}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
