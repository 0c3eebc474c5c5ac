//! Configuration and pipelines behind the `mla-forge` binary.

pub mod commands;
pub mod config;

pub use commands::Options;
pub use config::{load_config, parse_config, RunConfig};
