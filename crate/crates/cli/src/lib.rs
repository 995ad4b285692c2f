//! Command-line orchestration: phantom cohorts, experiment runs and GradCAM
//! exports, with every output written under `<output_dir>/<experiment>/`.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plots;

pub use config::{run_config_schema, Overrides, RunConfig, RunMode};
pub use error::CliError;
