//! Command-line front end for `sfdepth`: TOML configuration, one function per
//! subcommand, and the end-to-end pipeline.

pub mod commands;
pub mod config;
pub mod pipeline;
