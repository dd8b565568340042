//! Desk-scale forecasting of weekly cellular traffic.
//!
//! The pipeline ingests per-cell weekly records (downlink volume and average
//! user count), buckets cells by point-of-interest category, clusters each
//! POI's standardized downlink profiles with k-means, trains one multi-branch
//! basis-expansion forecaster per retained cluster, and benchmarks the result
//! against a naive persistence baseline with MAPE.
//!
//! Modules follow the stages:
//!
//! - [`synth`]: deterministic synthetic corpus generator
//! - [`dataset`]: ingestion, validation, POI bucketing, train/test split
//! - [`preprocess`]: per-cell standardization and supervised windows
//! - [`clustering`]: per-POI k-means and the cluster retention filter
//! - [`neural`]: dense layers, exact backprop, Adam
//! - [`nbeats`]: doubly residual forecaster blocks, branches, training
//! - [`evaluate`]: naive baseline, MAPE, per-POI report
//! - [`config`] / [`run`]: reproducible run configuration and stage orchestration

pub mod clustering;
pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod nbeats;
pub mod neural;
pub mod preprocess;
pub mod run;
pub mod synth;

pub use error::{Error, Result};
