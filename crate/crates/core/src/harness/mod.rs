//! Configuration, checkpoints, pipelines and the command-line interface.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod pipeline;

pub use checkpoint::{Container, Kind};
pub use config::RunConfig;
