//! Metrics, experiment configuration, orchestration and report output.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod report;

pub use config::{DataConfig, ExperimentConfig, OutputConfig};
pub use experiment::{build_aggregator, build_data, run_experiment, Experiment, ExperimentData, ExperimentResult, Summary};
pub use metrics::{compute_asr, compute_ds, detection_prf, ConvergenceMonitor, DetectionCounts};
pub use report::{read_jsonl, write_jsonl_line, write_summary_csv, RoundReport, CSV_COLUMNS};
