//! Experiment harness for the quantitative group testing decoder: configs,
//! multi-seed runs, sweeps, CSV/SVG outputs and replay.

pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod run;

pub use config::{Architecture, ExperimentConfig, RunConfig, Sweep, SweepAxis};
pub use error::{HarnessError, Result};
pub use report::emit_outputs;
pub use run::{
    run_complexity_study, run_experiment, run_single, run_sweep_measurements, run_sweep_noise, ResultRow, RunOutcome,
};
