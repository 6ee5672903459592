//! Experiment configuration and the pipeline behind the CLI.

mod commands;
mod config;
mod narf;
mod report;

pub use commands::*;
pub use config::*;
pub use narf::*;
pub use report::render;
