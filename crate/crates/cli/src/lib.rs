//! Command implementations behind the `clarity` binary.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use ablate::{cmd_ablate, Axis};
pub use commands::{cmd_evaluate, cmd_predict, cmd_train};
pub use config::RunConfig;
pub use error::{exit, CliError, Result};
pub use report::cmd_report;
