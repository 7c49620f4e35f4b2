//! Command-line driver for `phbeam`: JSON scenario files in, CSV traces,
//! deflection snapshots, profiles and a text report out.

pub mod config;
pub mod error;
pub mod run;

pub use config::{load_config, parse_config, write_config, ControllerConfig, ScenarioConfig};
pub use error::{CliError, Result};
pub use run::{check_casimir, energy_report_file, run, static_solve, RunReport};
