//! Reproducible experiment harness around the `mora` library: config
//! parsing, the train/sweep/ablation commands, and report consolidation.

pub mod config;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Overrides};
pub use report::{consolidate, RunReport};
pub use runner::{cmd_ablate_blocks, cmd_ablate_rank, cmd_sweep_missing, cmd_train};
