//! Command layer for `metactc`: run configuration, output locking, report
//! schemas, the oracle self-check and one function per subcommand.

pub mod cli;
pub mod commands;
pub mod config;
mod error;
pub mod lock;
pub mod report;
pub mod selfcheck;

pub use error::{CliError, CliResult};
