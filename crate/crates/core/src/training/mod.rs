//! Losses, SGD with momentum, plateau scheduling, the training loop and
//! checkpoints.

mod checkpoint;
mod loss;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TrainState};
pub use loss::{bce_loss, bce_pixel, mse_loss, BceValue};
pub use optim::{plateau_scheduler_step, sgd_momentum_step, OptimizerConfig, PlateauScheduler};
pub use train::{
    train, validation_loss, LogEntry, LossKind, StopReason, TrainConfig, TrainError, TrainLog, TrainSource,
    Trainer,
};
