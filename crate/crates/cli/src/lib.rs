//! Command-line front end: configuration, CSV ingestion, the seven-model
//! application pipeline and report emission.

pub mod application;
pub mod commands;
pub mod config;
pub mod emit;
pub mod error;
pub mod ingest;

pub use error::{CliError, CliResult};
