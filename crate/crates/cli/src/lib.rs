//! Config-driven front end: simulate recordings, localise sources,
//! evaluate runs against ground truth and sweep experiment parameters.

pub mod commands;
pub mod config;
mod error;
pub mod io;

pub use commands::Overrides;
pub use config::RunConfig;
pub use error::CliError;
