//! Library surface of the CLI, so commands are callable in-process from
//! integration tests.

pub mod commands;
pub mod config;
