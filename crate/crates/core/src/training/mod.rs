//! Multi-scale objective, optimizer, datasets, run configuration, checkpoints
//! and the training loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{DataSource, Preset, RunConfig, TrainConfig};
pub use data::{Checker, Dataset, GaussianBlobs, ImageFolder};
pub use loss::{loss_weights, multiscale_loss};
pub use optim::{optimizer_step, AdamState, AdamWConfig};
pub use trainer::{make_dataset, LossTrace, StepStats, Trainer};
