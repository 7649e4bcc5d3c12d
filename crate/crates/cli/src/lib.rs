//! `groundseg` command-line tool: batch annotation, evaluation, image
//! editing, a mock inference backend and the review service.

pub mod args;
pub mod commands;
pub mod files;
pub mod mock_server;
pub mod service;

use std::process::ExitCode;

use thiserror::Error;

pub use args::Cli;

/// Failure of one invocation, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, config or input documents (exit 2).
    #[error("{0}")]
    Usage(String),
    /// A run that failed at runtime (exit 1).
    #[error("{0}")]
    Runtime(String),
    /// A named file, scene or target does not exist (exit 3).
    #[error("{0}")]
    NotFound(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Usage(_) => 2,
            CliError::NotFound(_) => 3,
        }
    }
}

pub fn init_tracing() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into());
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .try_init();
}

pub fn run(cli: Cli) -> ExitCode {
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
