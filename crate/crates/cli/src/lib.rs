//! Configuration-driven experiments for the `hybrid-vi` library: data
//! generation, fitting, grid-oracle comparison, posterior sampling and
//! evaluation, with CSV and JSON artifacts.

pub mod config;
pub mod io;
pub mod metrics;
pub mod report;
pub mod run;

pub use config::{ConfigError, ExperimentConfig};
pub use report::RunReport;
pub use run::{exit_code, run_eval, run_fit, run_oracle, run_sample_posterior, run_simulate};
