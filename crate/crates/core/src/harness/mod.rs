//! Configuration-driven experiment runner behind the `ris-sim` binary.

pub mod config;
pub mod run;

pub use config::{load_config, ConfigError, ExperimentConfig};
pub use run::{run_crb_sweep, run_mc_mse, synth, write_csv, ResultRow, RunError, CSV_HEADER};
