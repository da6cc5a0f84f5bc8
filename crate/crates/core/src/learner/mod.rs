//! Desk-scale classifier, continual-learning losses and the training engine.

mod loss;
mod model;
mod train;

pub use loss::{
    ewc_penalty, fisher_diag, loss_and_grad, loss_and_grad_with, si_consolidate, si_penalty, si_step, EwcAnchor,
    SiState,
};
pub use model::{softmax, Checkpoint, Example, Layout, Model, ParameterVector, Sample};
pub use train::{
    expected_steps, run_update, select_scenario, train, ContinualState, JobStatus, ResourceDemand, Scenario,
    TrainingReport, UpdateJob, UpdateOutcome,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LearnerError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("vector length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("batch contains an unlabeled sample")]
    UnlabeledBatch,
    #[error("no data")]
    EmptyData,
    #[error("class {class} is outside the model's {known} known classes")]
    UnknownClass { class: u32, known: usize },
    #[error("training set does not match the job manifest")]
    ManifestMismatch,
    #[error("loss or gradient became non-finite")]
    NumericalDivergence,
    #[error("invalid job transition {from:?} -> {to:?}")]
    InvalidTransition { from: JobStatus, to: JobStatus },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
}
