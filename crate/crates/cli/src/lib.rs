//! Command implementations behind the `afin` binary.

pub mod commands;
pub mod config;

pub use config::{Profile, RunConfig, SCHEMA_VERSION};
