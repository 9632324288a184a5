//! Command-line front end: training, evaluation, streaming inference, cost
//! tables, ablation sweeps and synthetic data generation.

mod args;
mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use args::{Cli, Command};
pub use manifest::{DataSource, Layout, RunManifest};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// An error carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: exit::CONFIG, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: exit::DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<makgcn::Error> for CliError {
    fn from(e: makgcn::Error) -> Self {
        use makgcn::Error as E;
        let code = match &e {
            E::Config { .. } | E::Usage(_) | E::Shape { .. } => exit::CONFIG,
            E::Divergence { .. } => exit::NUMERIC,
            E::InvalidInput(_) | E::Checkpoint(_) | E::Parse { .. } | E::Io { .. } => exit::DATA,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::CONFIG } else { exit::OK };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
    match commands::dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
