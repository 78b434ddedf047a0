//! Command line entry points and the HTTP service for wattsentinel.

pub mod api;
pub mod commands;
pub mod config;
pub mod monitor;

pub use commands::{CliError, Monitor};
pub use config::{AppConfig, SourceKind};
