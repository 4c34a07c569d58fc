//! Datasets, experiment configuration, the training loop, checkpoints and
//! sweeps for `softprune`.

// `!(x > 0)` is how NaN gets rejected alongside non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod sweep;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use data::Dataset;
pub use error::{HarnessError, Result};
pub use sweep::{SweepAxis, SweepTable};
pub use train::{evaluate, train, train_from_config, EpochMetrics, RunSummary, TrainOutcome};
