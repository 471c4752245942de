//! Curriculum training (NMT, two synthetic phases, authentic finetuning)
//! and the finetuning modes: single task, LS-MTL, Nash-MTL, domain adapters
//! and transfer from another pair's checkpoint.

mod config;
mod cts;
mod history;
mod stage;

pub use config::{Stage, TrainConfig, TrainMode, LR_SCHEDULE};
pub use cts::{
    build_vocab, init_model, run_cts, transfer_init, transfer_model, CtsInputs, CtsOptions, CtsOutcome, LOG_FILE,
};
pub use history::{EpochRecord, LogRecord, NashStats, TrainLog, TransitionRecord};
pub use stage::{
    derive_seed, domain_grouping, parallel_examples, train_domain_adapt, train_stage1_nmt, train_stage2_synthetic,
    train_stage3_finetune, train_synthetic_phase, triplet_examples, Adam, StageSummary,
};

#[cfg(test)]
mod tests;
