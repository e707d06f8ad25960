//! Library half of the `poseforge` binary: configuration, file formats,
//! fixture IO, and the command implementations, exposed so integration
//! tests can drive commands without spawning processes.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture_io;
pub mod formats;
pub mod logging;

pub use error::CliError;
