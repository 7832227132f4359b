//! Experiment orchestration: configuration, the online loop, and file I/O.

pub mod config;
pub mod experiment;
pub mod io;

pub use config::{ExperimentConfig, PurgeModeConfig};
pub use experiment::{run_experiment, run_from_trajectory, PurgeEvent, RunReport, SeriesPoint};
pub use io::{
    export_report, export_trajectory, ingest_trajectory, parse_state_list, parse_trajectory_csv,
    trajectory_to_csv,
};
