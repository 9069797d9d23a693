//! Command-line harness around the `heightcomp` library: synthetic tiles,
//! degradation, completion, evaluation, benchmarking, DSM updating and plots.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod methods;
pub mod plot;
