//! Experiment harness: configuration, datasets, orchestration and reports.

pub mod dataset;

pub use dataset::{ingest_dataset, synthetic_image, DatasetSplits};
