//! Optimiser, schedule, training and evaluation loops, gradient suites and
//! the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod train;

pub use config::{Preset, RunConfig, TrainConfig};
pub use data::{crop_window, load_pairs, random_crop_pair, Pair};
pub use eval::evaluate;
pub use optim::{adamw_step, cosine_lr, AdamWConfig, OptimizerState};
pub use train::{moving_average, train, TrainOptions, TrainOutcome};
