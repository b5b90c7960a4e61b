//! Heatmap targets, loss, optimizer, augmentation, the epoch loop and
//! checkpoints.

mod augment;
mod checkpoint;
mod optim;
mod target;
mod trainer;

pub use augment::{apply_augmentation, augment, AugmentParams, TrainSample};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{lookahead, sgd_nesterov_step, OptimizerState};
pub use target::{make_target, mse_loss};
pub use trainer::{evaluate_loss, loss_csv, sample_gradient, train, SigmaUnits, TrainConfig};
