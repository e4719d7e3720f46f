//! Configuration, orchestration and report emission.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{
    parse_config, AdversaryConfig, AttackConfig, DataConfig, ExperimentConfig, MetricsConfig,
    ModelConfig, PartitionSpec, Seeds, ServerConfig,
};
pub use report::{emit_report, FinalMetrics, RoundSummary, RunReport};
pub use runner::{benign_twin, build_scenario, run_experiment, RunOptions, Scenario};
