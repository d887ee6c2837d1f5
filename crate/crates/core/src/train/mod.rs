//! Optimizer, learning-rate schedule and the epoch loop.

pub mod config;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use config::{RunConfig, TrainConfig};
pub use optim::AdamW;
pub use schedule::lr_schedule;
pub use trainer::{compute_gradient, evaluate_loss, Batch, EpochRecord, FitOptions, FitReport, TrainState, Trainer};
