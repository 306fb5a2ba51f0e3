//! Command-line pipeline: `gen`, `train`, `decode`, `eval` and `bench`,
//! driven by one TOML run configuration.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::Context;
pub use config::RunConfig;
pub use error::{CliError, Result};
