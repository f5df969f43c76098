//! Command-line front end for `mono-gp`: run configs, CSV ingestion,
//! ensemble snapshots and report files.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod report;
pub mod snapshot;

pub use cli::run;
pub use error::CliError;
