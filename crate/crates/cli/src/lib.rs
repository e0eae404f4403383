//! Configuration and subcommands behind the `neuroprune` binary.

pub mod commands;
pub mod config;

pub use config::{Overrides, RunConfig};
