//! Command-line front end: configuration, dataset schema and the five
//! subcommands. The binary in `main.rs` only parses arguments and maps
//! errors to exit codes.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;

pub use config::{stream_seed, RunConfig};
pub use error::{CliError, CliResult};
