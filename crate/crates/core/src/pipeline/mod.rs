//! Synthetic data, the end-to-end model, training and run artifacts.

pub mod checkpoint;
pub mod config;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;

pub use config::{OptimizerKind, PipelineConfig};
pub use model::{BatchForward, Discriminators, Generator, SampleForward};
pub use synth::{generate_dataset, AudioSource, Dataset};
pub use train::{evaluate, train, EvalSummary, LossRow, TrainResult};
