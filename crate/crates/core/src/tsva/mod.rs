//! Two-shot fusion network: configuration, training, inference, checkpoints.

pub mod checkpoint;
mod model;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use model::{TsvaConfig, TsvaModel};
pub use train::{infer, infer_batch, train, EpochLog, TrainOptions, TrainOutcome};
