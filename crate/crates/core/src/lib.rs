//! Deterministic federated-learning simulator: synthetic non-IID data,
//! byzantine and backdoor attacks, robust aggregation and benchmark metrics.

pub mod adversary;
pub mod aggregators;
pub mod datagen;
pub mod error;
pub mod fedcore;
pub mod harness;
pub mod metrics;
pub mod numkit;
pub mod selftest;

pub use error::{FedError, Result};
pub use harness::{emit_report, parse_config, run_experiment, ExperimentConfig, RunOptions, RunReport};
pub use numkit::{ModelDims, ModelParams};
