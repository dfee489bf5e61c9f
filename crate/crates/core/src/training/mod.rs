//! Dice-loss training of an instantiated U-net.

mod loss;
mod optim;
mod train;

pub use loss::{dice_loss, dice_loss_grad, DICE_SMOOTH};
pub use optim::{make_optimizer, Optimizer, OptimizerKind};
pub use train::{
    dataset_dice_loss, read_history, train, write_history, CheckpointPolicy, EpochStats, TrainConfig, TrainResult,
    DEFAULT_EPOCHS,
};
