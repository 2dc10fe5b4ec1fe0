//! Command-line front end: run configuration, dataset assembly and the
//! `pretrain`, `finetune`, `analyze` and `schedule` commands.

pub mod commands;
pub mod config;
pub mod datasets;
pub mod error;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};
