//! Command implementations behind the `qkmps` binary.

pub mod commands;
pub mod config;
pub mod error;
