//! Experiment runner for the `fedxfer` simulator: TOML configuration, the
//! pretrain → transfer → verify pipeline, and metrics export.

// `!(x >= y)` is used on purpose so that NaN fails every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod model_file;

pub use config::ExperimentConfig;
pub use error::CliError;
