//! Joint multi-task training: the supervised option loss plus a weighted MLM term.

mod config;
mod data;
mod masking;
mod trainer;

pub use config::{lr_at, MlmSequences, ModelShape, TrainConfig};
pub use data::{sample_mixture, PreparedCorpus, PreparedExample, PreparedTask};
pub use masking::{apply_masking, MaskedSequence, PrefixPolicy, Replacement};
pub use trainer::{
    accuracy, dev_accuracy, joint_gradients, joint_step, mlm_loss, mtl_loss, option_nll, pretrain_then_finetune, two_stage_plan,
    EpochRecord, MlmLoss, Objective, RunMetrics, Stage, StepLosses, StepRecord, TrainBatch, Trainer, STAGE_FINETUNE,
    STAGE_MULTITASK,
};
