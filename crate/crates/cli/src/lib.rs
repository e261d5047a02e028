//! Command-line scenario runner for the tweezer-loading toolkit:
//! configuration ingestion, seeded figure recipes and checksummed outputs.

pub mod app;
pub mod config;
pub mod error;
pub mod output;
pub mod scenarios;

pub use config::ScenarioConfig;
pub use error::CliError;
