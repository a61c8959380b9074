//! Losses, learning-rate schedule, optimizer and the training loop.

pub mod loss;
pub mod sgd;
pub mod train;

pub use loss::{deep_supervision_loss, dice_ce_loss, LossConfig, LossOutput};
pub use sgd::{poly_lr, sgd_step, OptimizerConfig, OptimizerState};
pub use train::{train_loop, EpochRecord, TrainConfig, TrainData, TrainLog};
