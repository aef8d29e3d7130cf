//! Loss, augmentation, optimizer, the training loop and checkpoints.

pub mod adam;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod runner;

pub use adam::{adam_update, AdamConfig, AdamState};
pub use augment::{augment, AugmentConfig};
pub use checkpoint::{Checkpoint, Manifest, TensorEntry};
pub use config::TrainConfig;
pub use loss::{soft_iou_loss, soft_iou_value, DEFAULT_LOSS_EPS};
pub use runner::{log_csv, train_loop, train_loop_with, TrainOutcome, TrainRecord, CHECKPOINT_BEST, CHECKPOINT_FINAL, TRAIN_LOG};
