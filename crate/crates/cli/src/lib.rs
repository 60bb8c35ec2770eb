//! Command-line front end for the diffad toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod report;

pub use error::{CliError, CliResult};
