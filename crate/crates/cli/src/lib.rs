//! HTTP service and batch commands for the pentarag routing cascade.

pub mod commands;
pub mod config;
pub mod server;

pub use config::ServiceConfig;
