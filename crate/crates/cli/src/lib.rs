//! Pipeline driver: dataset generation, pretraining, synthesis,
//! quantization, evaluation, diagnostics and reporting.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;
pub use error::{CliError, Result};
