//! Batch front end: configuration, commands and CSV output.

pub mod commands;
pub mod config;
pub mod table;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("every simulated point diverged")]
    Diverged,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Core(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Diverged => 4,
            CliError::Io(_) | CliError::Core(_) => 1,
        }
    }
}
