//! Library surface of the `advlab` binary: config schema, seed splitting,
//! and the subcommand implementations, exposed so integration tests can
//! drive them directly.

pub mod commands;
pub mod config;
