//! Batch front end: configuration, CSV ingestion, command dispatch and
//! artifact serialization.

pub mod config;
pub mod error;
pub mod ingest;
pub mod run;

pub use config::RunConfig;
pub use error::CliError;
pub use run::{execute, Command};

/// Environment variable that overrides the configured worker count.
pub const WORKERS_ENV: &str = "CDR_WORKERS";
