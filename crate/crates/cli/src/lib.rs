//! Command layer behind the `sheafpc` binary.

pub mod commands;
pub mod config;
pub mod manifest;

pub use commands::{cmd_diagnose, cmd_spectrum, cmd_sweep, cmd_train, RunOptions};
pub use config::RunConfig;
pub use manifest::RunManifest;
