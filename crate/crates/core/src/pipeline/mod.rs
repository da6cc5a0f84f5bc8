//! The serving loop: collect, detect, update, validate, deploy.
//!
//! A [`Service`] owns every piece of mutable state for one model service and
//! is the single writer of its registry and event log. Each stage emits an
//! event; [`ServiceStatus`] is a fold over those events, so the status served
//! to clients can always be recomputed from the log.

mod events;

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{ConfigError, ConfigErrorKind, ServiceConfig};
use crate::data::{
    render_query, sample_rehearsal_excluding, ClCache, ClassId, DataError, DataManifest, LabelQueue, LabelSource, ManifestCounts,
    ObservedRequest, RecordId, RequestRecord, Selection,
};
use crate::drift::{error_signal, evaluate_window, DriftError, DriftLevel, DriftReport, EddmState};
use crate::evaluator::{
    accuracy, profile, validate, Decision, EvalError, LineageEntry, RuleOutcome, ValidationVerdict,
};
use crate::learner::{
    run_update, select_scenario, train, ContinualState, Layout, LearnerError, Model, Scenario, TrainingReport,
    UpdateJob, UpdateOutcome,
};
use crate::registry::{ModelCard, Registry, RegistryError, VersionId, VersionStatus};
use crate::sim::{place_job, Cluster, SimJob};
use crate::synthetic::StreamRow;

pub use events::{EventLog, PipelineEvent, PipelineEventKind, PipelineState, ServiceStatus};

const PIPELINE_ACTOR: &str = "pipeline";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Drift(#[from] DriftError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("need at least {needed} labeled history records, got {got}")]
    NotEnoughHistory { needed: usize, got: usize },
    #[error("initial model rejected: {0}")]
    BootstrapRejected(String),
}

/// How update jobs spend time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Finish after the modeled duration: steps times the simulated step
    /// time, inflated when sharing the inference worker.
    Sim,
    /// Finish as soon as SGD returns; wall-clock time is reported.
    Real,
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub mode: TrainingMode,
    pub seed: u64,
    pub registry_path: Option<PathBuf>,
    pub event_log_path: Option<PathBuf>,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { mode: TrainingMode::Sim, seed: 0, registry_path: None, event_log_path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub record_id: RecordId,
    pub prediction: ClassId,
    pub confidence: f64,
    pub version_id: VersionId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub version_id: VersionId,
    pub parent_id: Option<VersionId>,
    pub status: VersionStatus,
    pub created_at: u64,
    pub scenario: Scenario,
    pub verdict: Decision,
}

/// A model card together with the query that reproduces its training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardView {
    pub version_id: VersionId,
    pub service: String,
    pub status: VersionStatus,
    pub card: ModelCard,
    pub query: String,
}

/// Everything recorded about one update job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job: UpdateJob,
    pub trigger: DriftReport,
    pub training: Option<TrainingReport>,
    pub version_id: Option<VersionId>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
struct InFlight {
    job_id: u64,
    outcome: UpdateOutcome,
    holdout: Vec<RequestRecord>,
    done_at: u64,
    sim_secs: f64,
}

#[derive(Debug, Clone)]
enum Phase {
    /// Filling the reference window after a (re)deployment.
    Reference,
    Monitoring,
    /// Waiting for enough labeled post-trigger records.
    Collecting { first_id: RecordId, labeled: usize, trigger: DriftReport },
    Training(Box<InFlight>),
}

/// State a version needs if it is (re)deployed later.
#[derive(Debug, Clone)]
struct VersionExtras {
    state: ContinualState,
    holdout: Vec<RequestRecord>,
    entry: LineageEntry,
}

pub struct Service {
    config: ServiceConfig,
    options: ServiceOptions,
    registry: Registry,
    log: EventLog,
    status: ServiceStatus,
    cache: ClCache,
    labels: LabelQueue,
    eddm: EddmState,
    model: Model,
    state: ContinualState,
    phase: Phase,
    reference: Vec<RequestRecord>,
    monitored: usize,
    since_check: usize,
    /// Consecutive checks that fired.
    streak: usize,
    next_window: u64,
    next_job: u64,
    jobs: BTreeMap<u64, JobRecord>,
    extras: BTreeMap<VersionId, VersionExtras>,
    /// Deployed lineage and the holdout each version was validated on.
    lineage: Vec<(VersionId, LineageEntry, Vec<RequestRecord>)>,
    /// Records reserved for validation; never used for training.
    holdout_ids: HashSet<RecordId>,
    clock: u64,
}

fn known(model: &Model) -> usize {
    model.num_classes()
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn holdout_split(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

impl Service {
    /// Trains, validates and deploys the first version from labeled history.
    ///
    /// History rows enter the cache as labeled records, so they are part of
    /// the rehearsal pool for later updates.
    pub fn bootstrap(
        config: ServiceConfig,
        history: &[StreamRow],
        options: ServiceOptions,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let dim = config.model_spec.input_dim;
        let labeled: Vec<&StreamRow> = history.iter().filter(|r| r.label.is_some()).collect();
        if labeled.len() < 4 {
            return Err(PipelineError::NotEnoughHistory { needed: 4, got: labeled.len() });
        }
        if config.data_policy.cache_capacity < config.drift_policy.window_size {
            return Err(ConfigError {
                line: None,
                field: "cache_capacity".into(),
                kind: ConfigErrorKind::OutOfRange,
                message: "must hold at least one drift window".into(),
            }
            .into());
        }
        for r in &labeled {
            if r.features.len() != dim {
                return Err(DataError::DimensionMismatch { expected: dim, got: r.features.len() }.into());
            }
        }

        let registry = match &options.registry_path {
            Some(p) => Registry::open(p, &config.service_name, config.model_spec.clone())?,
            None => Registry::in_memory(&config.service_name, config.model_spec.clone()),
        };
        let log = match &options.event_log_path {
            Some(p) => EventLog::create(p)?,
            None => EventLog::in_memory(),
        };
        let d = &config.drift_policy;
        let mut svc = Self {
            status: ServiceStatus::new(&config.service_name),
            cache: ClCache::new(config.data_policy.cache_capacity, dim),
            labels: LabelQueue::new(),
            eddm: EddmState::new(d.min_errors_warmup, d.eddm_warning, d.eddm_drift),
            model: Model::zeros(Layout::from_spec(&config.model_spec)),
            state: ContinualState::default(),
            phase: Phase::Reference,
            reference: Vec::new(),
            monitored: 0,
            since_check: 0,
            streak: 0,
            next_window: 1,
            next_job: 1,
            jobs: BTreeMap::new(),
            extras: BTreeMap::new(),
            lineage: Vec::new(),
            holdout_ids: HashSet::new(),
            clock: 0,
            registry,
            log,
            options,
            config,
        };

        let n_hold = holdout_split(labeled.len(), svc.config.validation_policy.holdout_fraction);
        let (train_rows, hold_rows) = labeled.split_at(labeled.len() - n_hold);
        let seed = svc.options.seed;
        let init = Model::init(Layout::from_spec(&svc.config.model_spec), seed);
        let outcome = train(
            &init,
            train_rows,
            &[],
            Scenario::Offline,
            &svc.config.cl_policy,
            &ContinualState::default(),
            seed,
        )?;

        let mut ids = Vec::with_capacity(labeled.len());
        for r in &labeled {
            let (prediction, confidence) = outcome.model.predict(&r.features)?;
            ids.push(svc.cache.collect(ObservedRequest {
                arrival: 0,
                features: r.features.clone(),
                prediction,
                confidence,
                label: r.label,
                label_source: LabelSource::Annotator,
            })?);
        }
        let train_ids = ids[..train_rows.len()].to_vec();
        svc.holdout_ids.extend(&ids[train_rows.len()..]);
        let holdout: Vec<RequestRecord> =
            ids[train_rows.len()..].iter().map(|&id| svc.cache.get(id).cloned().expect("just collected")).collect();
        debug_assert_eq!(holdout.len(), hold_rows.len());

        let acc = accuracy(&outcome.model, &holdout)?;
        let min = svc.config.validation_policy.min_accuracy;
        let passed = acc >= min;
        let verdict = ValidationVerdict {
            decision: if passed { Decision::Accepted } else { Decision::Rejected },
            holdout_acc_new: acc,
            holdout_acc_old: 0.0,
            ab: None,
            reasons: vec![RuleOutcome {
                rule: "min_accuracy".into(),
                passed,
                detail: format!("initial model {acc:.4} vs minimum {min:.4}; no incumbent to compare"),
            }],
        };
        if !passed {
            return Err(PipelineError::BootstrapRejected(verdict.reasons[0].detail.clone()));
        }
        let manifest = DataManifest::new(
            Selection { time_range: Some((0, 1)), classes: train_rows.iter().filter_map(|r| r.label).collect(), sampled_ids: Vec::new(), seed },
            train_ids,
            ManifestCounts { new: train_rows.len(), rehearsal: 0 },
            0,
        );
        let entry = LineageEntry {
            model: outcome.model.clone(),
            steps: outcome.report.steps,
            wall_clock_secs: svc.training_secs(&outcome.report, 0.0),
        };
        let benchmark = profile(std::slice::from_ref(&entry), std::slice::from_ref(&holdout))?;
        let card = ModelCard {
            loss_config: svc.config.cl_policy.clone(),
            scenario: Scenario::Offline,
            benchmark,
            data_manifest: manifest,
            validation: verdict,
            training: Some(TrainingReport { wall_clock_secs: entry.wall_clock_secs, ..outcome.report.clone() }),
        };
        let version = svc.registry.register_version(outcome.model.params.clone(), card)?;
        svc.extras.insert(version.version_id, VersionExtras { state: outcome.state, holdout, entry });
        svc.deploy_version(version.version_id, PIPELINE_ACTOR, false)?;
        Ok(svc)
    }

    fn training_secs(&self, report: &TrainingReport, sim_secs: f64) -> f64 {
        match self.options.mode {
            TrainingMode::Sim => sim_secs,
            TrainingMode::Real => report.wall_clock_secs,
        }
    }

    fn emit(&mut self, kind: PipelineEventKind) -> Result<(), PipelineError> {
        self.status.apply(&kind);
        self.log.append(self.clock, &self.config.service_name, kind)?;
        Ok(())
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.service_name
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn events(&self) -> &EventLog {
        &self.log
    }

    pub fn status(&self) -> &ServiceStatus {
        &self.status
    }

    pub fn cache(&self) -> &ClCache {
        &self.cache
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn jobs(&self) -> &BTreeMap<u64, JobRecord> {
        &self.jobs
    }

    pub fn clock_ms(&self) -> u64 {
        self.clock
    }

    pub fn pending_labels(&self) -> Vec<RecordId> {
        self.labels.pending().collect()
    }

    fn deployed_id(&self) -> VersionId {
        self.registry.deployed().map(|v| v.version_id).expect("a service always has a deployed version")
    }

    /// Moves the logical clock forward and finishes any job that is due.
    pub fn advance(&mut self, t_ms: u64) -> Result<(), PipelineError> {
        self.clock = self.clock.max(t_ms);
        self.registry.set_clock(self.clock);
        if matches!(&self.phase, Phase::Training(f) if self.clock >= f.done_at) {
            let Phase::Training(flight) = std::mem::replace(&mut self.phase, Phase::Reference) else { unreachable!() };
            self.finish_update(*flight)?;
        }
        Ok(())
    }

    /// Serves one request. Unlabeled low-confidence requests are queued for
    /// labeling.
    pub fn infer(&mut self, features: Vec<f64>, t_ms: u64) -> Result<InferResult, PipelineError> {
        self.observe(features, None, LabelSource::None, t_ms)
    }

    /// Serves one request whose label is already known (a replayed stream).
    pub fn ingest(&mut self, features: Vec<f64>, label: Option<ClassId>, t_ms: u64) -> Result<InferResult, PipelineError> {
        self.observe(features, label, LabelSource::Online, t_ms)
    }

    fn observe(
        &mut self,
        features: Vec<f64>,
        label: Option<ClassId>,
        source: LabelSource,
        t_ms: u64,
    ) -> Result<InferResult, PipelineError> {
        self.advance(t_ms)?;
        let (prediction, confidence) = self.model.predict(&features).map_err(|e| match e {
            LearnerError::DimensionMismatch { expected, got } => PipelineError::Data(DataError::DimensionMismatch { expected, got }),
            other => other.into(),
        })?;
        let record_id = self.cache.collect(ObservedRequest {
            arrival: self.clock,
            features,
            prediction,
            confidence,
            label,
            label_source: source,
        })?;
        if label.is_none() && confidence < self.config.data_policy.label_confidence_threshold {
            self.labels.enqueue(&self.cache, record_id)?;
        }
        self.labels.prune(&self.cache);
        let record = self.cache.get(record_id).cloned().expect("just collected");
        let level = self.eddm.update(error_signal(&record), record_id)?;
        self.on_record(&record, level)?;
        Ok(InferResult { record_id, prediction, confidence, version_id: self.deployed_id() })
    }

    /// Attaches an annotator label to a queued record.
    pub fn label(&mut self, record_id: RecordId, label: ClassId, actor: &str) -> Result<(), PipelineError> {
        self.labels.provide_label(&mut self.cache, record_id, label)?;
        self.emit(PipelineEventKind::LabelAttached { record_id, label, actor: actor.to_string() })?;
        if let Phase::Collecting { first_id, labeled, .. } = &mut self.phase {
            if record_id >= *first_id {
                *labeled += 1;
            }
        }
        self.maybe_start_update()
    }

    fn on_record(&mut self, record: &RequestRecord, level: DriftLevel) -> Result<(), PipelineError> {
        let window = self.config.drift_policy.window_size;
        match &mut self.phase {
            Phase::Reference => {
                self.reference.push(record.clone());
                if self.reference.len() >= window {
                    self.phase = Phase::Monitoring;
                    self.monitored = 0;
                    self.since_check = 0;
                }
                Ok(())
            }
            Phase::Monitoring => {
                self.monitored += 1;
                self.since_check += 1;
                if self.monitored >= window && self.since_check >= self.config.drift_policy.check_interval {
                    self.since_check = 0;
                    self.check_window(level)?;
                }
                Ok(())
            }
            Phase::Collecting { labeled, .. } => {
                if record.label.is_some() {
                    *labeled += 1;
                }
                self.maybe_start_update()
            }
            Phase::Training(_) => Ok(()),
        }
    }

    fn check_window(&mut self, level: DriftLevel) -> Result<(), PipelineError> {
        let window = self.config.drift_policy.window_size;
        let current = self.cache.snapshot_window(window)?;
        let window_id = self.next_window;
        self.next_window += 1;
        let report = evaluate_window(window_id, &self.reference, &current, &self.config.drift_policy, level, known(&self.model))?;
        let labeled: Vec<&RequestRecord> = current.iter().filter(|r| r.label.is_some()).collect();
        let acc = if labeled.is_empty() {
            self.status.current_accuracy
        } else {
            labeled.iter().filter(|r| r.is_error() == Some(false)).count() as f64 / labeled.len() as f64
        };
        self.emit(PipelineEventKind::WindowChecked {
            window_id,
            magnitude: report.magnitude,
            min_p_value: report.min_p_value(),
            eddm_level: report.eddm_level,
            accuracy: acc,
            triggered: report.triggered,
        })?;
        self.streak = if report.triggered { self.streak + 1 } else { 0 };
        if self.streak >= self.config.drift_policy.confirm_checks {
            self.streak = 0;
            self.emit(PipelineEventKind::DriftTriggered { window_id, magnitude: report.magnitude })?;
            self.phase = Phase::Collecting { first_id: current.last().map_or(1, |r| r.record_id + 1), labeled: 0, trigger: report };
        }
        Ok(())
    }

    fn maybe_start_update(&mut self) -> Result<(), PipelineError> {
        let window = self.config.drift_policy.window_size;
        let Phase::Collecting { first_id, labeled, .. } = &self.phase else { return Ok(()) };
        if *labeled < window {
            return Ok(());
        }
        let first_id = *first_id;
        let Phase::Collecting { trigger, .. } = std::mem::replace(&mut self.phase, Phase::Reference) else { unreachable!() };
        self.start_update(first_id, trigger)
    }

    fn start_update(&mut self, first_id: RecordId, trigger: DriftReport) -> Result<(), PipelineError> {
        let fresh_all: Vec<RequestRecord> = self.cache.buffer().filter(|r| r.record_id >= first_id).cloned().collect();
        let fresh: Vec<RequestRecord> = self.cache.labeled().filter(|r| r.record_id >= first_id).cloned().collect();
        let n_hold = holdout_split(fresh.len(), self.config.validation_policy.holdout_fraction);
        let (new_records, holdout) = fresh.split_at(fresh.len() - n_hold);

        let window_id = self.next_window;
        self.next_window += 1;
        let report = evaluate_window(
            window_id,
            &self.reference,
            &fresh_all,
            &self.config.drift_policy,
            self.eddm.level,
            known(&self.model),
        )?;
        let policy = self.config.cl_policy.clone();
        let scenario = select_scenario(&report, &policy.scenario_thresholds);
        let job_id = self.next_job;
        self.next_job += 1;
        self.emit(PipelineEventKind::ScenarioSelected {
            job_id,
            scenario,
            new_class_fraction: report.new_class_fraction,
            magnitude: report.magnitude,
        })?;

        let ratio = if scenario == Scenario::Offline {
            1.0
        } else if policy.loss.uses_rehearsal() {
            policy.rehearsal_ratio
        } else {
            0.0
        };
        let seed = mix(self.options.seed, job_id);
        self.holdout_ids.extend(holdout.iter().map(|r| r.record_id));
        let (training_set, manifest) = sample_rehearsal_excluding(&self.cache, new_records, &self.holdout_ids, ratio, seed)?;
        let mut job = UpdateJob::new(job_id, scenario, manifest, policy, self.deployed_id());
        self.emit(PipelineEventKind::JobQueued {
            job_id,
            manifest_id: job.manifest.manifest_id.clone(),
            content_digest: job.manifest.content_digest.clone(),
            new_records: job.manifest.counts.new,
            rehearsal_records: job.manifest.counts.rehearsal,
            shortfall: job.manifest.shortfall,
        })?;
        self.jobs.insert(job_id, JobRecord { job: job.clone(), trigger, training: None, version_id: None, error: None });

        let interference = &self.config.cluster_policy.interference;
        let sim_job = SimJob::from_update(&job, self.clock as f64, interference.training_step_time);
        let cluster = Cluster::new(self.config.cluster_policy.workers).map_err(|e| DataError::InvalidRecord(e.to_string()))?;
        let Some(worker) = place_job(self.config.cluster_policy.placement, &cluster, &sim_job) else {
            return self.fail_job(job_id, "no worker is eligible under the placement policy".into());
        };

        let outcome = match run_update(&mut job, &self.model, &training_set, &self.state, seed) {
            Ok(o) => o,
            Err(e) => {
                self.jobs.get_mut(&job_id).expect("job recorded").job = job;
                return self.fail_job(job_id, e.to_string());
            }
        };
        let factor = if cluster.workers[worker].inference_assigned { interference.kappa_train } else { 1.0 };
        let step_us = (interference.training_step_time * factor * 1000.0).round() as u64;
        let sim_us = step_us * outcome.report.steps as u64;
        let duration_ms = match self.options.mode {
            TrainingMode::Sim => sim_us.div_ceil(1000),
            TrainingMode::Real => 0,
        };
        self.emit(PipelineEventKind::JobStarted {
            job_id,
            worker,
            expected_steps: job.resource_demand.relative_cost as usize,
            duration_ms,
        })?;
        let record = self.jobs.get_mut(&job_id).expect("job recorded");
        record.job = job;
        self.phase = Phase::Training(Box::new(InFlight {
            job_id,
            outcome,
            holdout: holdout.to_vec(),
            done_at: self.clock + duration_ms,
            sim_secs: sim_us as f64 / 1e6,
        }));
        self.advance(self.clock)
    }

    fn fail_job(&mut self, job_id: u64, error: String) -> Result<(), PipelineError> {
        if let Some(r) = self.jobs.get_mut(&job_id) {
            r.error = Some(error.clone());
        }
        self.emit(PipelineEventKind::JobFailed { job_id, error })?;
        self.rebaseline();
        Ok(())
    }

    fn rebaseline(&mut self) {
        self.phase = Phase::Reference;
        self.reference.clear();
        self.streak = 0;
        let d = &self.config.drift_policy;
        self.eddm = EddmState::new(d.min_errors_warmup, d.eddm_warning, d.eddm_drift);
    }

    fn finish_update(&mut self, flight: InFlight) -> Result<(), PipelineError> {
        let InFlight { job_id, outcome, holdout, sim_secs, .. } = flight;
        let report = TrainingReport { wall_clock_secs: self.training_secs(&outcome.report, sim_secs), ..outcome.report.clone() };
        self.emit(PipelineEventKind::JobFinished {
            job_id,
            steps: report.steps,
            final_loss: report.epoch_losses.last().copied().unwrap_or(0.0),
            expanded_from: report.expanded_from,
        })?;
        let job = self.jobs[&job_id].job.clone();
        self.jobs.get_mut(&job_id).expect("job recorded").training = Some(report.clone());

        let verdict = validate(
            &outcome.model,
            &self.model,
            &holdout,
            &job.manifest.record_ids,
            &self.config.validation_policy,
            mix(self.options.seed, job_id + 1),
        )?;
        let entry = LineageEntry { model: outcome.model.clone(), steps: report.steps, wall_clock_secs: report.wall_clock_secs };
        let mut lineage: Vec<LineageEntry> = self.lineage.iter().map(|(_, e, _)| e.clone()).collect();
        let mut tests: Vec<Vec<RequestRecord>> = self.lineage.iter().map(|(_, _, h)| h.clone()).collect();
        lineage.push(entry.clone());
        tests.push(holdout.clone());
        let benchmark = profile(&lineage, &tests)?;
        let decision = verdict.decision;
        let (acc_new, acc_old) = (verdict.holdout_acc_new, verdict.holdout_acc_old);
        let card = ModelCard {
            loss_config: job.loss_config.clone(),
            scenario: job.scenario,
            benchmark,
            data_manifest: job.manifest.clone(),
            validation: verdict,
            training: Some(report),
        };
        let version = self.registry.register_version(outcome.model.params.clone(), card)?;
        let version_id = version.version_id;
        self.jobs.get_mut(&job_id).expect("job recorded").version_id = Some(version_id);
        self.extras.insert(version_id, VersionExtras { state: outcome.state, holdout, entry });
        self.emit(PipelineEventKind::CandidateRegistered {
            job_id,
            version_id,
            parent_id: version.parent_id,
            decision,
            holdout_acc_new: acc_new,
            holdout_acc_old: acc_old,
        })?;
        match decision {
            Decision::Accepted => self.deploy_version(version_id, PIPELINE_ACTOR, false)?,
            Decision::Rejected => {
                self.registry.reject(version_id, PIPELINE_ACTOR)?;
                self.emit(PipelineEventKind::Rejected { version_id, actor: PIPELINE_ACTOR.into() })?;
                self.rebaseline();
            }
            Decision::PendingManual => self.rebaseline(),
        }
        Ok(())
    }

    fn deploy_version(&mut self, version_id: VersionId, actor: &str, manual_override: bool) -> Result<(), PipelineError> {
        self.registry.deploy(version_id, actor, manual_override)?;
        let version = self.registry.get(version_id).expect("just deployed").clone();
        let extras = self.extras.get(&version_id).cloned();
        self.model = Model { params: version.params };
        if let Some(x) = extras {
            self.state = x.state;
            self.lineage.push((version_id, x.entry, x.holdout));
        }
        self.emit(PipelineEventKind::Deployed {
            version_id,
            learned_classes: known(&self.model),
            accuracy: version.model_card.validation.holdout_acc_new,
            actor: actor.to_string(),
            manual_override,
        })?;
        self.rebaseline();
        Ok(())
    }

    /// Runs a job that is still training to completion.
    pub fn drain(&mut self) -> Result<(), PipelineError> {
        if let Phase::Training(f) = &self.phase {
            let t = f.done_at;
            self.advance(t)?;
        }
        Ok(())
    }

    pub fn history(&self) -> Vec<HistoryRow> {
        self.registry
            .versions()
            .map(|v| HistoryRow {
                version_id: v.version_id,
                parent_id: v.parent_id,
                status: v.status,
                created_at: v.created_at,
                scenario: v.model_card.scenario,
                verdict: self.registry.effective_decision(v.version_id).unwrap_or(v.model_card.validation.decision),
            })
            .collect()
    }

    pub fn card(&self, version_id: VersionId) -> Option<CardView> {
        let v = self.registry.get(version_id)?;
        Some(CardView {
            version_id,
            service: self.name().to_string(),
            status: v.status,
            query: render_query(&v.model_card.data_manifest),
            card: v.model_card.clone(),
        })
    }

    fn history_row(&self, version_id: VersionId) -> HistoryRow {
        self.history().into_iter().find(|r| r.version_id == version_id).expect("version exists")
    }

    /// Operator acceptance of a candidate, which is then deployed.
    pub fn approve(&mut self, version_id: VersionId, actor: &str) -> Result<HistoryRow, PipelineError> {
        self.registry.approve(version_id, actor)?;
        self.emit(PipelineEventKind::VerdictOverridden { version_id, decision: Decision::Accepted, actor: actor.to_string() })?;
        self.deploy_version(version_id, actor, false)?;
        Ok(self.history_row(version_id))
    }

    pub fn reject(&mut self, version_id: VersionId, actor: &str) -> Result<HistoryRow, PipelineError> {
        self.registry.reject(version_id, actor)?;
        self.emit(PipelineEventKind::VerdictOverridden { version_id, decision: Decision::Rejected, actor: actor.to_string() })?;
        self.emit(PipelineEventKind::Rejected { version_id, actor: actor.to_string() })?;
        Ok(self.history_row(version_id))
    }

    pub fn rollback(&mut self, actor: &str) -> Result<HistoryRow, PipelineError> {
        let from = self.deployed_id();
        let version = self.registry.rollback(actor)?;
        if self.lineage.last().map(|l| l.0) == Some(from) {
            self.lineage.pop();
        }
        if let Some(x) = self.extras.get(&version.version_id) {
            self.state = x.state.clone();
        }
        self.model = Model { params: version.params.clone() };
        self.emit(PipelineEventKind::RolledBack {
            from,
            to: version.version_id,
            learned_classes: known(&self.model),
            actor: actor.to_string(),
        })?;
        self.rebaseline();
        Ok(self.history_row(version.version_id))
    }

    /// Merges a JSON patch into the drift and validation policies.
    ///
    /// The patched config goes through the same checks as a parsed file;
    /// on error nothing changes.
    pub fn update_policy(&mut self, patch: serde_json::Value, actor: &str) -> Result<&ServiceConfig, PipelineError> {
        let field_error = |field: &str, kind: ConfigErrorKind, message: String| ConfigError {
            line: None,
            field: field.to_string(),
            kind,
            message,
        };
        let serde_json::Value::Object(sections) = &patch else {
            return Err(field_error("", ConfigErrorKind::TypeMismatch, "patch must be a JSON object".into()).into());
        };
        let mut current = serde_json::to_value(&self.config).expect("config serializes");
        for (section, body) in sections {
            if section != "drift_policy" && section != "validation_policy" {
                return Err(field_error(section, ConfigErrorKind::UnknownKey, format!("`{section}` cannot be patched")).into());
            }
            let serde_json::Value::Object(fields) = body else {
                return Err(field_error(section, ConfigErrorKind::TypeMismatch, "expected an object".into()).into());
            };
            let target = current[section].as_object_mut().expect("policy sections are objects");
            for (k, v) in fields {
                if !target.contains_key(k) {
                    return Err(field_error(k, ConfigErrorKind::UnknownKey, format!("unknown field `{k}`")).into());
                }
                target.insert(k.clone(), v.clone());
            }
        }
        let patched: ServiceConfig = serde_json::from_value(current).map_err(|e| {
            let msg = e.to_string();
            let field = sections
                .values()
                .filter_map(|b| b.as_object())
                .flat_map(|o| o.keys())
                .find(|k| msg.contains(k.as_str()))
                .cloned()
                .unwrap_or_default();
            field_error(&field, ConfigErrorKind::TypeMismatch, msg)
        })?;
        patched.validate()?;
        self.config = patched;
        self.emit(PipelineEventKind::PolicyUpdated { actor: actor.to_string(), patch })?;
        Ok(&self.config)
    }
}

/// Bootstraps on the first `window_size` rows of `stream`, then replays the
/// rest at the configured request rate.
pub fn run_pipeline(config: ServiceConfig, stream: &[StreamRow], options: ServiceOptions) -> Result<Service, PipelineError> {
    let n_boot = config.drift_policy.window_size.min(stream.len());
    let rate = config.cluster_policy.request_rate;
    let mut svc = Service::bootstrap(config, &stream[..n_boot], options)?;
    for (i, row) in stream[n_boot..].iter().enumerate() {
        let t = ((i + 1) as f64 * 1000.0 / rate).round() as u64;
        svc.ingest(row.features.clone(), row.label, t)?;
    }
    svc.drain()?;
    Ok(svc)
}
