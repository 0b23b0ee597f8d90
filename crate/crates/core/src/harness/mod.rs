//! Experiment harness: configs, corpora, training runs, sweeps and reports.

pub mod check;
pub mod config;
pub mod corpus;
pub mod logs;
pub mod report;
pub mod sweep;
pub mod train;

pub use config::{parse_grid, RunConfig};
pub use corpus::{ingest, synthetic_text, Corpus};
pub use report::{build_report, report_json, Report};
pub use sweep::{sweep, SweepResult};
pub use train::{train_run, RunLogEntry, TrainOutcome};
