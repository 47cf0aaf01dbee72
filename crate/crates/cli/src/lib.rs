//! Scenario loading and run orchestration behind the `cotrans` binary.

pub mod run;
pub mod scenario;

pub use run::{run, ExitCode, RunReport, RunRequest};
pub use scenario::{parse_scenario, parse_str, to_toml};
