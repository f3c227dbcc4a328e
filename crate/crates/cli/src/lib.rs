//! Command-line front end: cost reports, benchmarks, training on generated
//! data, tracking, and the weight file format.

pub mod commands;
pub mod config;
pub mod weights;

pub use commands::{run, Cli};
