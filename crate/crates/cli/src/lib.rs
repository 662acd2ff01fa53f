//! Command implementations behind the `deskbert` binary.
//!
//! Each command lives in its own module and returns [`CliError`], which maps
//! onto the process exit codes: 0 success, 1 runtime failure, 2 configuration
//! or usage error.

pub mod ablate_cmd;
pub mod eval_cmd;
pub mod pretrain_cmd;
pub mod settings;
pub mod task_cmd;
pub mod vocab_cmd;

use std::fs;
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad config values, missing input files.
    #[error("{0}")]
    Config(String),
    /// Failures once the run is underway: unreadable data, training errors.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn config(msg: impl Into<String>) -> CliError {
        CliError::Config(msg.into())
    }

    pub fn runtime(err: impl std::fmt::Display) -> CliError {
        CliError::Runtime(err.to_string())
    }
}

/// Missing inputs are configuration errors, caught before any work starts.
pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(CliError::config(format!(
            "{} not found: {}",
            what,
            path.display()
        )));
    }
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)?;
    fs::write(path, text + "\n")
        .map_err(|e| CliError::Runtime(format!("writing {}: {}", path.display(), e)))
}

pub fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    println!(
        "{}",
        serde_json::to_string_pretty(value).map_err(CliError::runtime)?
    );
    Ok(())
}

pub fn ensure_out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {}", path.display(), e)))
}
