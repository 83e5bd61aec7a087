//! Optimisation loop: schedule, optimiser, per-iteration losses,
//! epoch-level selection monitoring and checkpoints.

mod config;
mod evaluate;
mod optim;
mod schedule;
mod trainer;

pub use config::TrainConfig;
pub use evaluate::{evaluate, EvalOptions};
pub use optim::Sgd;
pub use schedule::lr_schedule;
pub use trainer::{batch_standardize, compute_losses, inputs_of, IterMetrics, TrainSet, Trainer};
