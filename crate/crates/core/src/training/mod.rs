//! Optimization recipe: losses, schedule, optimizer, checkpoints and the loop.

pub mod checkpoint;
pub mod loss;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{config_hash, Checkpoint, CheckpointMeta};
pub use loss::{bce, combined_loss, dice_loss};
pub use optim::{AdamW, AdamWConfig, OptimizerState};
pub use schedule::{OneCycle, OneCycleConfig};
pub use trainer::{validate, EpochRecord, TrainConfig, TrainOutcome, Trainer};
