//! Experiment orchestration: configuration, the per-command drivers behind
//! the CLI, synthetic datasets, aggregation across runs and parameter sweeps.
//!
//! Every command reads and writes plain files inside one output directory,
//! so each step of a run can be repeated or inspected independently.

mod config;
mod report;
mod runs;
mod synth;

pub use config::{ExperimentConfig, Preset};
pub use report::{
    cmd_report, cmd_sweep, mean_std, read_run, summarize, ReportRow, SummaryRow, SweepGrid, SweepOutcome, SweepPoint,
    REPORT_FILE, REPORT_HEADER, SUMMARY_FILE, SWEEP_LOG_FILE,
};
pub use runs::*;
pub use synth::{generate_synthetic_dataset, synth_sample, Shape, SynthSpec};
