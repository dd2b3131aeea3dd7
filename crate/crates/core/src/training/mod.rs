//! Minibatch training: optimizers, cosine learning-rate schedule and
//! early stopping on a held-out validation split.

mod config;
mod optim;
mod trainer;

pub use config::{OptimizerKind, TrainConfig};
pub use optim::{
    apply_step, cosine_lr, step_adagrad, step_adam, step_adamw, step_sgd, AdamHyper, OptimizerState,
};
pub use trainer::{
    train, train_with_validation, validation_metrics, EarlyStopper, EpochRecord, StopReason,
    TrainLog,
};
