//! Command-line driver: configuration, run directories, metrics logs,
//! reports and the objective ablation.

pub mod ablation;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod table;

pub use commands::{dispatch, Command, Invocation};
pub use config::RunConfig;
pub use error::CliError;
