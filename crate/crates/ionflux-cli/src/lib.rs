//! Library surface of the batch CLI so integration tests can drive commands
//! in-process.

pub mod commands;
pub mod config;
pub mod log;
pub mod manifest;
