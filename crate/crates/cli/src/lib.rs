//! Library side of the `histogen` command-line tool. Every subcommand is a
//! plain function over a [`Config`] so tests can drive full runs in-process.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod grid;

use std::path::{Path, PathBuf};

pub use commands::*;
pub use config::Config;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] histogen_core::Error),

    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    /// 1 usage/config, 2 runtime/numeric, 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(histogen_core::Error::Config(_)) => 1,
            CliError::Io { .. } | CliError::Core(_) => 2,
            CliError::Check(_) => 3,
        }
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
