//! File formats, configuration and command implementations for the
//! `prompt-ttt` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pgm;
pub mod report;

pub use error::{CliError, CliResult};
