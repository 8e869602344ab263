//! Experiment orchestration: configuration, workload setup, the protocol and
//! baseline round loops, metrics, and multi-method comparison.

mod compare;
mod config;
mod metrics;
mod run;
mod workload;

pub use compare::{compare, ComparisonReport, ComparisonRow, CellResult, COMPARISON_CSV_HEADER};
pub use config::{
    BaselineConfig, DataConfig, DevicesConfig, ExperimentConfig, Method, PolicyConfig, ProfileSpec,
};
pub use metrics::{
    convergence_epoch, final_accuracy, Format, MetricsLog, MetricsRow, METRICS_CSV_HEADER,
};
pub use run::{
    build_payload, run_baseline, run_experiment, run_with_observer, top_k_coordinates, NoopObserver,
    RunObserver, RunOutcome, UploadRecord,
};
pub use workload::{derive_seed, device_seed, ShardCursor, Workload};
