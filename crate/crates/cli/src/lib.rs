//! Library side of the `focus-unet` command-line tool.

pub mod commands;
pub mod report;
pub mod run_config;
pub mod visual;

pub use commands::{exit_code, CliError, CliResult};
pub use run_config::RunConfig;
