//! Command-line pipeline, oracle metrics and evaluation utilities.

pub mod args;
pub mod commands;
pub mod eval;
pub mod metrics;
