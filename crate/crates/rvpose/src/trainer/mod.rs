//! Three-stage training: Adam optimization, learning-rate schedules, and
//! the stage loops with sliding-window stateful training.

mod adam;
mod config;
mod runlog;
mod schedule;
mod stages;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS};
pub use config::{ConfigError, GenConfig, TrainConfig};
pub use runlog::{LogRecord, RunLog};
pub use schedule::{lr_schedule, ScheduleKind, CYCLICAL_CYCLES, STEP_EVERY};
pub use stages::{train_stage1, train_stage2, train_stage3, StageOutput};

use crate::diffcore::graph::GraphError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("graph: {0}")]
    Graph(#[from] GraphError),
    #[error("non-finite gradient in {param}; step aborted")]
    NonFiniteGrad { param: String },
    #[error("training diverged at step {step} ({detail}); last-good checkpoint {last_good:?}")]
    Diverged {
        step: u64,
        detail: String,
        last_good: Option<std::path::PathBuf>,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] crate::diffcore::checkpoint::CheckpointError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
