//! Experiment configuration, seeded runs, evaluation and ablations.

pub mod ablation;
pub mod config;
pub mod eval;
pub mod run;
pub mod seed;

pub use ablation::{run_ablation, AblationConfig, AblationSummary};
pub use config::{ExperimentConfig, Method};
pub use eval::{evaluate_pass_at_k, pass_at_k};
pub use run::{run_experiment, RunRecord, RunRow};
