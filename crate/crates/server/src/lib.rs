//! Collection server: HTTP API over the orchestrator, plus the library
//! behind the `laps` command-line tool.

pub mod app;
pub mod auth;
pub mod cli;
pub mod config;
pub mod error;
pub mod store;
