//! Command-line front end for generating synthetic models, training and
//! evaluating SAEs on them, and aggregating runs.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{CliError, CliResult};
