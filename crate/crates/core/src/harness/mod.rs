//! Configuration, the training loop, baselines, experiment drivers and
//! run artifacts.

pub mod artifacts;
pub mod baseline;
pub mod config;
pub mod experiments;
pub mod train;

pub use baseline::{BaselineKind, ImputationBaseline};
pub use config::{AblationFlags, DataConfig, RectifierConfig, RunConfig, TrainConfig};
pub use experiments::{ablate, run_seed, train_seed, Aggregate, AblationTable, ModelKind, RunData, SeedRun, TrainedModel};
pub use train::{fit, FitReport, Predictor};
