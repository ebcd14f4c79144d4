//! Command-line driver: experiment configs, run directories and the
//! subcommands built on top of them.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use error::{CliError, Result};
