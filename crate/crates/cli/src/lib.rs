//! Command-line front end for the stabilized trainer: JSON run configs,
//! JSONL traces, controller replay of recorded KL tables, and multi-seed
//! comparison reports.

pub mod cli;
pub mod compare;
pub mod config;
pub mod error;
pub mod replay;
pub mod trace;

pub use cli::run_cli;
pub use error::{CliError, CliResult};
