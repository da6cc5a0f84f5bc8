//! Append-only model registry.
//!
//! Every mutation appends one JSON record. Records are never rewritten; the
//! current status of each version is derived by replaying them, which is also
//! how a registry is reopened from disk.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ClPolicy, ModelSpec};
use crate::data::DataManifest;
use crate::evaluator::{Decision, MetricReport, ValidationVerdict};
use crate::learner::{ParameterVector, Scenario, TrainingReport};

pub type VersionId = u64;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VersionStatus {
    Candidate,
    Deployed,
    Rejected,
    RolledBack,
    Archived,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub loss_config: ClPolicy,
    pub scenario: Scenario,
    pub benchmark: MetricReport,
    pub data_manifest: DataManifest,
    pub validation: ValidationVerdict,
    pub training: Option<TrainingReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub version_id: VersionId,
    pub parent_id: Option<VersionId>,
    pub params: ParameterVector,
    pub status: VersionStatus,
    pub model_card: ModelCard,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegistryEvent {
    Registered {
        version: Box<ModelVersion>,
    },
    StatusChanged {
        version_id: VersionId,
        from: VersionStatus,
        to: VersionStatus,
        actor: String,
        manual_override: bool,
    },
    VerdictOverridden {
        version_id: VersionId,
        decision: Decision,
        actor: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub schema_version: u32,
    pub seq: u64,
    pub t: u64,
    pub service: String,
    #[serde(flatten)]
    pub event: RegistryEvent,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("parameters do not fit the model spec: {0}")]
    DimensionMismatch(String),
    #[error("unknown version {0}")]
    UnknownVersion(VersionId),
    #[error("version {0} has not passed validation")]
    NotValidated(VersionId),
    #[error("version {version_id} is {status:?}, expected {expected:?}")]
    InvalidStatus { version_id: VersionId, status: VersionStatus, expected: VersionStatus },
    #[error("nothing to roll back to")]
    NothingToRollBack,
    #[error("registry log is corrupt at line {line}: {message}")]
    Corrupt { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Registry for one service. Single writer; clone for a read snapshot.
#[derive(Debug)]
pub struct Registry {
    service: String,
    spec: ModelSpec,
    records: Vec<RegistryRecord>,
    /// Raw log lines, exactly as written.
    lines: Vec<String>,
    versions: BTreeMap<VersionId, ModelVersion>,
    overrides: BTreeMap<VersionId, Decision>,
    deploy_stack: Vec<VersionId>,
    clock: u64,
    sink: Option<File>,
}

impl Clone for Registry {
    fn clone(&self) -> Self {
        Self {
            service: self.service.clone(),
            spec: self.spec.clone(),
            records: self.records.clone(),
            lines: self.lines.clone(),
            versions: self.versions.clone(),
            overrides: self.overrides.clone(),
            deploy_stack: self.deploy_stack.clone(),
            clock: self.clock,
            sink: None,
        }
    }
}

impl Registry {
    pub fn in_memory(service: &str, spec: ModelSpec) -> Self {
        Self {
            service: service.to_string(),
            spec,
            records: Vec::new(),
            lines: Vec::new(),
            versions: BTreeMap::new(),
            overrides: BTreeMap::new(),
            deploy_stack: Vec::new(),
            clock: 0,
            sink: None,
        }
    }

    /// Opens (or creates) a registry log and rebuilds the index from it.
    pub fn open(path: &Path, service: &str, spec: ModelSpec) -> Result<Self, RegistryError> {
        let mut reg = Self::in_memory(service, spec);
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (i, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: RegistryRecord = serde_json::from_str(&line)
                    .map_err(|e| RegistryError::Corrupt { line: i + 1, message: e.to_string() })?;
                if rec.schema_version != SCHEMA_VERSION {
                    return Err(RegistryError::Corrupt {
                        line: i + 1,
                        message: format!("unsupported schema_version {}", rec.schema_version),
                    });
                }
                if rec.service != service {
                    continue;
                }
                reg.apply(&rec).map_err(|e| RegistryError::Corrupt { line: i + 1, message: e.to_string() })?;
                reg.clock = reg.clock.max(rec.t);
                reg.records.push(rec);
                reg.lines.push(line);
            }
        }
        reg.sink = Some(OpenOptions::new().create(true).append(true).open(path)?);
        Ok(reg)
    }

    pub fn service(&self) -> &str {
        &self.service
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn records(&self) -> &[RegistryRecord] {
        &self.records
    }

    pub fn log_lines(&self) -> &[String] {
        &self.lines
    }

    /// Sets the logical time stamped on subsequent records.
    pub fn set_clock(&mut self, t: u64) {
        self.clock = self.clock.max(t);
    }

    pub fn versions(&self) -> impl Iterator<Item = &ModelVersion> {
        self.versions.values()
    }

    pub fn get(&self, id: VersionId) -> Option<&ModelVersion> {
        self.versions.get(&id)
    }

    pub fn deployed(&self) -> Option<&ModelVersion> {
        self.deploy_stack.last().and_then(|id| self.versions.get(id)).filter(|v| v.status == VersionStatus::Deployed)
    }

    /// The verdict in force: the card's, unless an operator overrode it.
    pub fn effective_decision(&self, id: VersionId) -> Option<Decision> {
        let v = self.versions.get(&id)?;
        Some(self.overrides.get(&id).copied().unwrap_or(v.model_card.validation.decision))
    }

    pub fn overridden(&self, id: VersionId) -> bool {
        self.overrides.contains_key(&id)
    }

    /// Whether a rollback would succeed.
    pub fn can_roll_back(&self) -> bool {
        self.deploy_stack.len() >= 2
    }

    fn append(&mut self, event: RegistryEvent) -> Result<(), RegistryError> {
        let rec = RegistryRecord {
            schema_version: SCHEMA_VERSION,
            seq: self.records.len() as u64 + 1,
            t: self.clock,
            service: self.service.clone(),
            event,
        };
        let line = serde_json::to_string(&rec).expect("registry records serialize");
        if let Some(f) = self.sink.as_mut() {
            f.write_all(line.as_bytes())?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        self.apply(&rec)?;
        self.records.push(rec);
        self.lines.push(line);
        Ok(())
    }

    fn apply(&mut self, rec: &RegistryRecord) -> Result<(), RegistryError> {
        match &rec.event {
            RegistryEvent::Registered { version } => {
                self.versions.insert(version.version_id, (**version).clone());
            }
            RegistryEvent::StatusChanged { version_id, from, to, .. } => {
                let v = self.versions.get_mut(version_id).ok_or(RegistryError::UnknownVersion(*version_id))?;
                if v.status != *from {
                    return Err(RegistryError::InvalidStatus { version_id: *version_id, status: v.status, expected: *from });
                }
                v.status = *to;
                match to {
                    VersionStatus::Deployed => {
                        if self.deploy_stack.last() != Some(version_id) {
                            self.deploy_stack.push(*version_id);
                        }
                    }
                    VersionStatus::RolledBack => {
                        self.deploy_stack.pop();
                    }
                    _ => {}
                }
            }
            RegistryEvent::VerdictOverridden { version_id, decision, .. } => {
                self.overrides.insert(*version_id, *decision);
            }
        }
        Ok(())
    }

    /// Appends a new candidate version.
    pub fn register_version(&mut self, params: ParameterVector, card: ModelCard) -> Result<ModelVersion, RegistryError> {
        let l = params.layout;
        if l.input_dim != self.spec.input_dim
            || l.hidden_dim != self.spec.hidden_dim
            || l.num_classes < self.spec.num_classes
        {
            return Err(RegistryError::DimensionMismatch(format!(
                "layout {}x{}x{} vs spec {}x{}x{}",
                l.input_dim, l.hidden_dim, l.num_classes, self.spec.input_dim, self.spec.hidden_dim, self.spec.num_classes
            )));
        }
        if params.values.len() != l.param_count() {
            return Err(RegistryError::DimensionMismatch(format!(
                "{} values for a layout of {} parameters",
                params.values.len(),
                l.param_count()
            )));
        }
        let version = ModelVersion {
            version_id: self.versions.keys().next_back().map_or(1, |v| v + 1),
            parent_id: self.deployed().map(|v| v.version_id),
            params,
            status: VersionStatus::Candidate,
            model_card: card,
            created_at: self.clock,
        };
        self.append(RegistryEvent::Registered { version: Box::new(version.clone()) })?;
        Ok(version)
    }

    fn set_status(
        &mut self,
        version_id: VersionId,
        to: VersionStatus,
        actor: &str,
        manual_override: bool,
    ) -> Result<(), RegistryError> {
        let from = self.versions[&version_id].status;
        self.append(RegistryEvent::StatusChanged { version_id, from, to, actor: actor.to_string(), manual_override })
    }

    fn candidate(&self, version_id: VersionId) -> Result<&ModelVersion, RegistryError> {
        let v = self.versions.get(&version_id).ok_or(RegistryError::UnknownVersion(version_id))?;
        if v.status != VersionStatus::Candidate {
            return Err(RegistryError::InvalidStatus {
                version_id,
                status: v.status,
                expected: VersionStatus::Candidate,
            });
        }
        Ok(v)
    }

    /// Deploys a validated candidate; the previous deployment is archived.
    pub fn deploy(&mut self, version_id: VersionId, actor: &str, manual_override: bool) -> Result<(), RegistryError> {
        self.candidate(version_id)?;
        if !manual_override && self.effective_decision(version_id) != Some(Decision::Accepted) {
            return Err(RegistryError::NotValidated(version_id));
        }
        if let Some(prev) = self.deployed().map(|v| v.version_id) {
            self.set_status(prev, VersionStatus::Archived, actor, false)?;
        }
        self.set_status(version_id, VersionStatus::Deployed, actor, manual_override)
    }

    /// Records an operator's acceptance of a candidate's verdict.
    pub fn approve(&mut self, version_id: VersionId, actor: &str) -> Result<(), RegistryError> {
        self.candidate(version_id)?;
        self.append(RegistryEvent::VerdictOverridden {
            version_id,
            decision: Decision::Accepted,
            actor: actor.to_string(),
        })
    }

    pub fn reject(&mut self, version_id: VersionId, actor: &str) -> Result<(), RegistryError> {
        self.candidate(version_id)?;
        if self.overrides.contains_key(&version_id) || self.effective_decision(version_id) != Some(Decision::Rejected) {
            self.append(RegistryEvent::VerdictOverridden {
                version_id,
                decision: Decision::Rejected,
                actor: actor.to_string(),
            })?;
        }
        self.set_status(version_id, VersionStatus::Rejected, actor, false)
    }

    /// Re-deploys the previously deployed version.
    pub fn rollback(&mut self, actor: &str) -> Result<ModelVersion, RegistryError> {
        if self.deploy_stack.len() < 2 {
            return Err(RegistryError::NothingToRollBack);
        }
        let current = self.deploy_stack[self.deploy_stack.len() - 1];
        let previous = self.deploy_stack[self.deploy_stack.len() - 2];
        self.set_status(current, VersionStatus::RolledBack, actor, false)?;
        self.set_status(previous, VersionStatus::Deployed, actor, false)?;
        Ok(self.versions[&previous].clone())
    }
}
