//! Command-line front end: configuration, staged runs, evaluation and
//! embedding export.

pub mod commands;
pub mod config;

pub use commands::{cmd_eval, cmd_export_embeddings, cmd_run, CliError, EvalOptions, RunOptions, StageArg};
pub use config::{ConfigError, DataSpec, RunConfig};
