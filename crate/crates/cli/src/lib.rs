//! Library surface of the command-line harness, shared with its
//! integration tests.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod run;
