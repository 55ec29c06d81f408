//! Experiment harness: configuration, sweep execution and result files
//! behind the `rimc` command-line tool.

pub mod config;
pub mod experiment;
pub mod results;
pub mod sweep;
