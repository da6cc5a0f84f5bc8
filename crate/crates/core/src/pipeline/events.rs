use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::drift::DriftLevel;
use crate::evaluator::Decision;
use crate::learner::Scenario;
use crate::registry::VersionId;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineEventKind {
    Deployed {
        version_id: VersionId,
        learned_classes: usize,
        accuracy: f64,
        actor: String,
        manual_override: bool,
    },
    WindowChecked {
        window_id: u64,
        magnitude: f64,
        min_p_value: f64,
        eddm_level: DriftLevel,
        accuracy: f64,
        triggered: bool,
    },
    DriftTriggered {
        window_id: u64,
        magnitude: f64,
    },
    ScenarioSelected {
        job_id: u64,
        scenario: Scenario,
        new_class_fraction: f64,
        magnitude: f64,
    },
    JobQueued {
        job_id: u64,
        manifest_id: String,
        content_digest: String,
        new_records: usize,
        rehearsal_records: usize,
        shortfall: usize,
    },
    JobStarted {
        job_id: u64,
        worker: usize,
        expected_steps: usize,
        duration_ms: u64,
    },
    JobFinished {
        job_id: u64,
        steps: usize,
        final_loss: f64,
        expanded_from: Option<usize>,
    },
    JobFailed {
        job_id: u64,
        error: String,
    },
    CandidateRegistered {
        job_id: u64,
        version_id: VersionId,
        parent_id: Option<VersionId>,
        decision: Decision,
        holdout_acc_new: f64,
        holdout_acc_old: f64,
    },
    Rejected {
        version_id: VersionId,
        actor: String,
    },
    VerdictOverridden {
        version_id: VersionId,
        decision: Decision,
        actor: String,
    },
    RolledBack {
        from: VersionId,
        to: VersionId,
        learned_classes: usize,
        actor: String,
    },
    LabelAttached {
        record_id: u64,
        label: u32,
        actor: String,
    },
    PolicyUpdated {
        actor: String,
        patch: serde_json::Value,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub schema_version: u32,
    pub seq: u64,
    /// Milliseconds since pipeline start.
    pub t_ms: u64,
    pub service: String,
    #[serde(flatten)]
    pub kind: PipelineEventKind,
}

/// Append-only event log, optionally mirrored to a JSON-lines file.
#[derive(Debug, Default)]
pub struct EventLog {
    events: Vec<PipelineEvent>,
    lines: Vec<String>,
    sink: Option<File>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Starts a fresh log file at `path`, truncating any previous one.
    pub fn create(path: &Path) -> std::io::Result<Self> {
        let sink = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        Ok(Self { sink: Some(sink), ..Self::default() })
    }

    pub fn append(&mut self, t_ms: u64, service: &str, kind: PipelineEventKind) -> std::io::Result<&PipelineEvent> {
        let ev = PipelineEvent {
            schema_version: SCHEMA_VERSION,
            seq: self.events.len() as u64 + 1,
            t_ms,
            service: service.to_string(),
            kind,
        };
        let line = serde_json::to_string(&ev).expect("events serialize");
        if let Some(f) = self.sink.as_mut() {
            writeln!(f, "{line}")?;
            f.flush()?;
        }
        self.events.push(ev);
        self.lines.push(line);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn events(&self) -> &[PipelineEvent] {
        &self.events
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    /// SHA-256 over the log lines, each terminated by a newline.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.lines {
            h.update(l.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn parse_lines(text: &str) -> Result<Vec<PipelineEvent>, serde_json::Error> {
        text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineState {
    Serving,
    Detecting,
    Training,
    Validating,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub service_name: String,
    pub learned_classes: usize,
    /// Labeled accuracy over the most recent checked window.
    pub current_accuracy: f64,
    pub drift_magnitude: f64,
    pub deployed_version: Option<VersionId>,
    pub pipeline_state: PipelineState,
}

impl ServiceStatus {
    pub fn new(service_name: &str) -> Self {
        Self {
            service_name: service_name.to_string(),
            learned_classes: 0,
            current_accuracy: 0.0,
            drift_magnitude: 0.0,
            deployed_version: None,
            pipeline_state: PipelineState::Serving,
        }
    }

    pub fn apply(&mut self, kind: &PipelineEventKind) {
        use PipelineEventKind as K;
        match kind {
            K::Deployed { version_id, learned_classes, accuracy, .. } => {
                self.deployed_version = Some(*version_id);
                self.learned_classes = *learned_classes;
                self.current_accuracy = *accuracy;
                self.drift_magnitude = 0.0;
                self.pipeline_state = PipelineState::Serving;
            }
            K::WindowChecked { magnitude, accuracy, .. } => {
                self.drift_magnitude = *magnitude;
                self.current_accuracy = *accuracy;
            }
            K::DriftTriggered { .. } => self.pipeline_state = PipelineState::Detecting,
            K::JobStarted { .. } => self.pipeline_state = PipelineState::Training,
            K::JobFinished { .. } => self.pipeline_state = PipelineState::Validating,
            K::JobFailed { .. } => self.pipeline_state = PipelineState::Serving,
            K::CandidateRegistered { decision, .. } => {
                if *decision != Decision::Accepted {
                    self.pipeline_state = PipelineState::Serving;
                }
            }
            K::RolledBack { to, learned_classes, .. } => {
                self.deployed_version = Some(*to);
                self.learned_classes = *learned_classes;
                self.drift_magnitude = 0.0;
                self.pipeline_state = PipelineState::Serving;
            }
            K::ScenarioSelected { .. }
            | K::JobQueued { .. }
            | K::Rejected { .. }
            | K::VerdictOverridden { .. }
            | K::LabelAttached { .. }
            | K::PolicyUpdated { .. } => {}
        }
    }

    /// Folds a log into the status it implies.
    pub fn replay<'a>(service_name: &str, events: impl IntoIterator<Item = &'a PipelineEvent>) -> Self {
        let mut s = Self::new(service_name);
        for e in events {
            s.apply(&e.kind);
        }
        s
    }
}
