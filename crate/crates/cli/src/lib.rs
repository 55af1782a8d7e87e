//! The `revsearch` command-line tool as a library, so tests can drive it
//! in-process.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

pub use args::Cli;
pub use config::{resolve, EffectiveConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_BEST_EFFORT: i32 = 10;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, files or settings; exit 2.
    Config(String),
    /// Anything else that stops a command; exit 1.
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Resolves configuration from the process environment, echoes it to
/// stderr and runs the subcommand. Returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let env = |name: &str| std::env::var(format!("{}{name}", config::ENV_PREFIX)).ok();
    let result = resolve(cli, &env).and_then(|cfg| {
        let echoed = serde_json::to_string_pretty(&cfg.to_json()).expect("config serializes");
        eprintln!("effective configuration:\n{echoed}");
        commands::dispatch(cli, &cfg)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
