//! Experiment plumbing: on-disk datasets, run configuration, ablation
//! plans and cost accounting.

pub mod config;
pub mod cost;
pub mod dataset;
pub mod plan;

pub use config::{parse_kv, DataConfig, RunConfig, Task};
pub use cost::{estimate_cost, CostEstimate};
pub use dataset::{build_items, content_hash, read_dataset, write_dataset, DataItem, DatasetSpec};
pub use plan::{run_plan, Arm, ExperimentPlan, Metric, MetricsRow, PlanKind, PlanReport};

use crate::experts::ExpertError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0} arm(s) failed")]
    ArmsFailed(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    /// Whether the error comes from invalid user input rather than from
    /// running the experiment.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Config(_) => true,
            HarnessError::Model(e) => matches!(e, ModelError::Config(_) | ModelError::Length(_)),
            HarnessError::Train(e) => matches!(e, TrainError::Config(_) | TrainError::Range(_)),
            HarnessError::Expert(e) => matches!(e, ExpertError::Config(_) | ExpertError::Range(_)),
            _ => false,
        }
    }

    /// Process exit status: 2 for validation errors, 3 for failed arms,
    /// 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        if self.is_validation() {
            2
        } else if matches!(self, HarnessError::ArmsFailed(_)) {
            3
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
