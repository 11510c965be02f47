//! Datasets, task streams, run configuration and the incremental training
//! loop.

mod config;
mod data;
mod pipeline;

pub use config::{ArchChoice, DataSource, Mode, RunConfig};
pub use data::{
    holdout_split, load_dataset, make_synthetic, split_tasks, Dataset, Holdout, TaskStream,
};
pub use pipeline::{
    average_accuracy, load_data, run_experiment, Pipeline, RunMetrics, HOLDOUT_FRACTION,
};
