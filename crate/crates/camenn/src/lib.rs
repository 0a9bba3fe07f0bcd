//! File formats, configuration and the training runner around `camenn-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod runner;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
