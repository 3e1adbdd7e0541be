//! Configuration-driven runner for the `coherence` library.
//!
//! A run reads one JSON [`ExperimentConfig`], executes the selected mode and
//! writes `results.csv`, `fit.json`, `summary.txt` and `manifest.json` into
//! the output directory.

pub mod build;
pub mod config;
pub mod error;
pub mod run;
pub mod table1;

pub use config::{ExperimentConfig, Mode, SCHEMA_VERSION};
pub use error::{CliError, Result};
pub use run::{execute, load_config, parse_config, run, Manifest, RunOutput};
pub use table1::{pipeline_table1, Table1Row};
