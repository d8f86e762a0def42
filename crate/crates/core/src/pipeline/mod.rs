//! Training, evaluation and export workflows.

pub mod ablate;
pub mod checkpoint;
pub mod data;
pub mod export;
pub mod finetune;
pub mod gradsuite;
pub mod metrics;
pub mod pretrain;
