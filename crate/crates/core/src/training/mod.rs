//! Optimizer, datasets, checkpoints and the training loop.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadOptions};
pub use data::{synth_dataset, DataSource, Dataset, Split, SynthSpec};
pub use optim::{adamw_step, clip_grad_norm, AdamWConfig, LrSchedule, OptimState};
pub use train::{evaluate, train_loop, EpochMetrics, TrainOptions, TrainOutcome};
