//! Training harness: configs, datasets, the training loop, checkpoints and
//! per-step metrics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{OptimizerKind, TrainConfig};
pub use data::{ingest_dataset, parse_csv, synthetic, Dataset, SyntheticKind, SyntheticSpec};
pub use metrics::{RunMetrics, StepMetrics, METRICS_HEADER};
pub use train::{
    compare_runs, dataset_loss, load_dataset, run_fp, run_qft, train, Comparison, QftRun,
    RunOutcome,
};
