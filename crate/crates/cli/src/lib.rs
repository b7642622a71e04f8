//! Command-line front end: corpus → pretraining → curriculum training →
//! phrase scoring, plus gradient checking and negative-sample dumps.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;

pub use args::Cli;
pub use commands::{run, RunConfig};
pub use error::{exit, CliError, CliResult};
