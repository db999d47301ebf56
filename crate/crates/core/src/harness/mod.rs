//! Configuration, execution and output of reproducible experiments.

pub mod config;
pub mod output;
pub mod run;
pub mod sweep;

pub use config::{Scenario, ScenarioConfig, SCHEMA_VERSION};
pub use output::{run_dir_name, write_run};
pub use run::{preflight, run_scenario, validate_config, MetricRow, RunRecord, Summary, Table, TrajectoryRow};
pub use sweep::{run_sweep, SweepAxis, SweepOutcome};
