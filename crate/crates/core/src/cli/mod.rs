//! Config parsing and the command-line workflows behind the binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_pipeline, cmd_report, cmd_synth, format_report, load_data, recompute_report, CliError};
pub use config::{ConfigError, DataSource, RunConfig, SplitPoint, SyntheticSettings};
