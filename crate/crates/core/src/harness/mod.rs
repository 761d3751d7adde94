//! Training harness: configs, models, tasks, metrics, checkpoints.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod task;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Arch, ExperimentConfig, ModelConfig, Role, TaskKind, TaskSpec, TrainConfig};
pub use metrics::{evaluate, evaluate_batch, Metrics};
pub use model::{Model, ModelInputs, ParamSet};
pub use task::{Batch, Split, Task};
pub use train::{run_experiment, train, LogRecord, Outcome, RunLog, TrainOptions};
