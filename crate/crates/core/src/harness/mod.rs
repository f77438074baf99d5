//! Metrics, configuration, experiment orchestration and reporting.

pub mod config;
pub mod experiment;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod report;

pub use config::{ExperimentConfig, Pipeline};
pub use experiment::{ablate, run_experiment, run_grid, MetricsReport, RunSummary};
pub use report::{compare, ComparisonTable};
