//! Command-line front end for the `bertv` toolkit.
//!
//! Every subcommand resolves a [`config::RunConfig`] from defaults, an
//! optional JSON file (`--config`) and per-key flags, echoes it to stdout as
//! JSON, then runs. Logs go to stderr.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage or config error.

pub mod args;
pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use thiserror::Error;

use args::{Cli, Command};
use commands::EncoderSchedule;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

/// Resolve the config for `command` and run it.
pub fn execute(command: &Command) -> Result<(), CliError> {
    let ov = command.overrides();
    let config = config::parse_config(ov.config.as_deref(), &ov.to_map())?;
    {
        let mut out = std::io::stdout().lock();
        writeln!(out, "{}", config.to_json_pretty()).map_err(anyhow::Error::from)?;
        out.flush().map_err(anyhow::Error::from)?;
    }
    match command {
        Command::Synth(_) => commands::synth(&config),
        Command::Ingest(_) => commands::ingest(&config),
        Command::TrainBertv(_) => commands::train_encoder(&config, EncoderSchedule::Validation),
        Command::TrainFixed(_) => commands::train_encoder(&config, EncoderSchedule::Fixed),
        Command::TrainTfidf(_) => commands::train_tfidf(&config),
        Command::Eval(_) => commands::eval(&config),
        Command::Classify(_) => commands::classify(&config),
        Command::Recommend(_) => commands::recommend(&config),
        Command::Gradcheck(_) => commands::gradcheck(&config),
    }
}

/// Parse `argv`, run, and return the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("bertv {}: error: {e}", cli.command.name());
            e.exit_code()
        }
    }
}
