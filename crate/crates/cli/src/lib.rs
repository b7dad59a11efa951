//! Command implementations and run configuration behind the `psimap` binary.

pub mod commands;
pub mod config;
