//! Federated multiplicative adaptation of frozen vision-language embeddings
//! with test-time prototyping for unseen classes.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod numerics;
pub mod prototyping;
pub mod server;
pub mod training;

pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentReport};
