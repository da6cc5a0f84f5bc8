//! Request collection, the bounded CL cache, rehearsal sampling and data
//! manifests.

mod cache;
mod labeling;
mod manifest;

pub use cache::{ClCache, ObservedRequest};
pub use labeling::LabelQueue;
pub use manifest::{content_digest, materialize, render_query, sample_rehearsal, sample_rehearsal_excluding, DataManifest, ManifestCounts, Selection};

use serde::{Deserialize, Serialize};

pub type RecordId = u64;
pub type ClassId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Online,
    Annotator,
    None,
}

/// One served inference request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub record_id: RecordId,
    /// Logical arrival time in ms.
    pub arrival: u64,
    pub features: Vec<f64>,
    pub prediction: ClassId,
    pub confidence: f64,
    pub label: Option<ClassId>,
    pub label_source: LabelSource,
}

impl RequestRecord {
    pub fn is_error(&self) -> Option<bool> {
        self.label.map(|l| l != self.prediction)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("cache is empty")]
    EmptyCache,
    #[error("new record {0} has no label")]
    UnlabeledNewData(RecordId),
    #[error("rehearsal ratio {0} is outside [0, 1]")]
    InvalidRatio(f64),
    #[error("records missing from the stores: {0:?}")]
    MissingRecords(Vec<RecordId>),
    #[error("materialized records do not match the manifest digest")]
    DigestMismatch,
    #[error("unknown record {0}")]
    UnknownRecord(RecordId),
    #[error("record {0} is not queued for labeling")]
    NotEnqueued(RecordId),
    #[error("record {0} is already labeled")]
    AlreadyLabeled(RecordId),
}
