//! Command-line front end: dataset and checkpoint persistence, run
//! configuration, report emission, and the `urm` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod persist;
pub mod report;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
