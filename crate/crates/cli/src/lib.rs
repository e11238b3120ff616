//! Library side of the `hetsae` command-line tool.

use std::ffi::OsString;

use clap::Parser;

pub mod commands;
pub mod config;
mod io;

/// Exit 2 for bad input or configuration, 3 for failures during a run.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self::Runtime(msg.into())
    }

    pub fn from_core_validation(e: hetsae::Error) -> Self {
        Self::Validation(e.to_string())
    }

    pub fn from_core_runtime(e: hetsae::Error) -> Self {
        match e {
            hetsae::Error::InvalidParameter(_)
            | hetsae::Error::Config(_)
            | hetsae::Error::Data(_)
            | hetsae::Error::Parse { .. } => Self::Validation(e.to_string()),
            other => Self::Runtime(other.to_string()),
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Validation(m) => write!(f, "invalid input: {m}"),
            Self::Runtime(m) => write!(f, "run failed: {m}"),
        }
    }
}

/// Parses `args` (program name first) and runs the command they describe.
pub fn run_args<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let flags = config::Flags::try_parse_from(args).map_err(|e| CliError::validation(e.to_string()))?;
    config::RunConfig::from_flags(flags).and_then(|cfg| commands::run(&cfg))
}
