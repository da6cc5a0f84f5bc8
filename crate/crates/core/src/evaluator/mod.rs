//! Continual-learning metrics, benchmarking and the deployment validator.

mod metrics;
mod validate;

pub use metrics::{
    accuracy, bwt, ce_efficiency, final_accuracy, ms_efficiency, profile, profile_with, AccuracyMatrix, LineageEntry, MetricReport,
};
pub use validate::{
    assign_arms, normal_cdf, two_proportion_z, validate, AbResult, Decision, RuleOutcome, ValidationVerdict, ZTest,
    MIN_ARM_SIZE,
};

use crate::data::RecordId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("at least two tasks are needed")]
    SingleTask,
    #[error("empty list")]
    EmptyList,
    #[error("costs must be positive")]
    NonPositive,
    #[error("accuracy matrix must be lower-triangular with entries in [0, 1]")]
    MalformedMatrix,
    #[error("no test set for task {0}")]
    MissingTestSet(usize),
    #[error("sample has no label")]
    Unlabeled,
    #[error("holdout is empty")]
    EmptyHoldout,
    #[error("holdout overlaps the training manifest: {0:?}")]
    OverlappingHoldout(Vec<RecordId>),
    #[error("model error: {0}")]
    Model(String),
}
