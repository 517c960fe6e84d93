//! Command-line driver for the gated CTR models: configuration, data
//! preparation, and the `train`, `eval`, `predict`, `gradcheck` and `ablate`
//! verbs.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use ablate::Axis;
pub use config::RunConfig;
pub use error::CliError;
