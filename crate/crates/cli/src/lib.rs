//! Library side of the `dvr` binary: run configuration and subcommands.

pub mod commands;
pub mod config;

pub use commands::{Failure, Inputs};
pub use config::RunConfig;
