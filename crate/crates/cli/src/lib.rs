//! Benchmark runners behind the `bilevel` command.
//!
//! Each experiment reads an [`ExperimentConfig`], runs deterministically for
//! its seed and produces a [`CsvReport`].

pub mod bench;
pub mod config;
pub mod report;

pub use bench::{run_hypergrad_bench, run_oracle_check, run_solver_bench, OracleCheckOutcome};
pub use config::{ConfigError, ExperimentConfig, ExperimentKind};
pub use report::{Cell, CsvReport};
