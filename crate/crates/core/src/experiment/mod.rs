//! Config-driven experiment pipeline: data, training stages, evaluation and
//! reports under one output root.

mod config;
mod pipeline;

pub use config::{EvalSelection, ExperimentConfig, Method, STAGES};
pub use pipeline::{
    evaluate, gen_data, load_dataset, report, run_all, train_dcd_stage,
    train_dpo_stage, train_sft, Layout, StageOutput,
};
