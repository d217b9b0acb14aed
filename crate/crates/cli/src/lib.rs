//! Experiment harness around the `metarims` core: configuration, training
//! runs, evaluation, tracing, ablations and SVG/CSV reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod report;
pub mod svg;

pub use config::RunConfig;
pub use error::{CliError, Result};
