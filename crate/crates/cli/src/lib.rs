//! Config parsing and subcommand bodies behind the `zsldg` binary.

pub mod commands;
pub mod config;
