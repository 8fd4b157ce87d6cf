//! Command-line plumbing for the `wfr` binary: config parsing, input and
//! output files, and subcommand dispatch.

pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use config::{parse_config, RunConfig};
pub use error::CliError;
pub use run::{run, Command, Invocation};
