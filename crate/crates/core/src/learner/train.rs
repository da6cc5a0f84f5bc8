//! Scenario selection and the training engine.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{fisher_diag, loss_and_grad, si_consolidate, si_step, EwcAnchor, SiState};
use super::model::{Model, Sample};
use super::LearnerError;
use crate::config::{ClPolicy, ScenarioThresholds};
use crate::data::{content_digest, DataManifest, RequestRecord};
use crate::drift::DriftReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// New classes.
    #[serde(rename = "NC")]
    Nc,
    /// New instances of known classes.
    #[serde(rename = "NI")]
    Ni,
    /// New instances and new classes.
    #[serde(rename = "NIC")]
    Nic,
    /// Full retrain from scratch.
    #[serde(rename = "OFFLINE")]
    Offline,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::Nc => "NC",
            Scenario::Ni => "NI",
            Scenario::Nic => "NIC",
            Scenario::Offline => "OFFLINE",
        })
    }
}

/// Picks the update scenario for a drift report.
///
/// `tau_offline = 1.0` disables the offline override: KS p-values underflow
/// for any strong shift, which would pin the magnitude at exactly 1.
pub fn select_scenario(report: &DriftReport, thresholds: &ScenarioThresholds) -> Scenario {
    if thresholds.tau_offline < 1.0 && report.magnitude >= thresholds.tau_offline {
        return Scenario::Offline;
    }
    let f = report.new_class_fraction;
    if f >= thresholds.tau_nc {
        Scenario::Nc
    } else if f > 0.0 {
        Scenario::Nic
    } else {
        Scenario::Ni
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceDemand {
    pub worker_slots: usize,
    /// Expected SGD steps; the simulator turns this into time.
    pub relative_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateJob {
    pub job_id: u64,
    pub scenario: Scenario,
    pub manifest: DataManifest,
    pub loss_config: ClPolicy,
    pub base_version: u64,
    pub status: JobStatus,
    pub resource_demand: ResourceDemand,
}

impl UpdateJob {
    pub fn new(job_id: u64, scenario: Scenario, manifest: DataManifest, loss_config: ClPolicy, base_version: u64) -> Self {
        let steps = expected_steps(manifest.record_ids.len(), &loss_config);
        Self {
            job_id,
            scenario,
            manifest,
            loss_config,
            base_version,
            status: JobStatus::Queued,
            resource_demand: ResourceDemand { worker_slots: 1, relative_cost: steps as f64 },
        }
    }

    /// Moves along `queued -> running -> {finished, failed}`.
    pub fn transition(&mut self, to: JobStatus) -> Result<(), LearnerError> {
        let ok = matches!(
            (self.status, to),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Finished)
                | (JobStatus::Running, JobStatus::Failed)
        );
        if !ok {
            return Err(LearnerError::InvalidTransition { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }
}

pub fn expected_steps(examples: usize, policy: &ClPolicy) -> usize {
    policy.epochs * examples.div_ceil(policy.batch_size.max(1))
}

/// Regularizer state carried from one update to the next.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContinualState {
    pub ewc: Option<EwcAnchor>,
    pub si: Option<SiState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub wall_clock_secs: f64,
    pub expanded_from: Option<usize>,
    /// Where the EWC anchor came from, if one was active.
    pub ewc_anchor: Option<String>,
}

#[derive(Debug, Clone)]
pub struct UpdateOutcome {
    pub model: Model,
    pub report: TrainingReport,
    pub state: ContinualState,
}

/// Trains `base` on `new_data` plus `rehearsal` under `policy`.
///
/// The EWC anchor is the Fisher of `base` on the rehearsal data when there is
/// any, otherwise the anchor carried in `prior`. SI importance continues from
/// `prior` and is consolidated at the end of the run.
pub fn train<S: Sample>(
    base: &Model,
    new_data: &[S],
    rehearsal: &[S],
    scenario: Scenario,
    policy: &ClPolicy,
    prior: &ContinualState,
    seed: u64,
) -> Result<UpdateOutcome, LearnerError> {
    let started = Instant::now();
    if policy.epochs == 0 {
        return Ok(UpdateOutcome {
            model: base.clone(),
            report: TrainingReport {
                epoch_losses: Vec::new(),
                steps: 0,
                wall_clock_secs: 0.0,
                expanded_from: None,
                ewc_anchor: None,
            },
            state: prior.clone(),
        });
    }

    let all: Vec<&S> = new_data.iter().chain(rehearsal).collect();
    if all.is_empty() {
        return Err(LearnerError::EmptyData);
    }
    let mut max_label = 0u32;
    for s in &all {
        max_label = max_label.max(s.label().ok_or(LearnerError::UnlabeledBatch)?);
    }
    let needed = max_label as usize + 1;
    let known = base.num_classes();
    if needed > known && scenario == Scenario::Ni {
        return Err(LearnerError::UnknownClass { class: max_label, known });
    }
    let target_classes = needed.max(known);

    let (mut model, prior) = if scenario == Scenario::Offline {
        (Model::init(base.layout().with_classes(target_classes), seed), ContinualState::default())
    } else {
        let expanded = base.expand_classes(target_classes);
        let from = base.layout();
        let to = expanded.layout();
        let remap = |v: &Vec<f64>| from.remap(v, &to, 0.0);
        let carried = ContinualState {
            ewc: prior.ewc.as_ref().map(|a| EwcAnchor {
                theta_star: remap(&a.theta_star),
                fisher_diag: remap(&a.fisher_diag),
                lambda: a.lambda,
            }),
            si: prior.si.as_ref().map(|s| SiState {
                omega_running: remap(&s.omega_running),
                omega: remap(&s.omega),
                theta_star: remap(&s.theta_star),
                xi: s.xi,
                c: s.c,
            }),
        };
        (expanded, carried)
    };

    let loss = policy.loss;
    let ewc = if loss.uses_ewc() && scenario != Scenario::Offline {
        // Fisher of the base model on what it already knows, so freshly added
        // output rows stay free.
        let old: Vec<&S> = rehearsal.iter().filter(|s| s.label().is_some_and(|l| (l as usize) < known)).collect();
        if !old.is_empty() {
            let fisher = base.layout().remap(&fisher_diag(base, &old, policy.fisher_samples)?, &model.layout(), 0.0);
            Some((
                EwcAnchor { theta_star: model.params.values.clone(), fisher_diag: fisher, lambda: policy.lambda },
                "rehearsal",
            ))
        } else {
            prior.ewc.clone().map(|a| (EwcAnchor { lambda: policy.lambda, ..a }, "carried"))
        }
    } else {
        None
    };
    let mut si = loss.uses_si().then(|| {
        let mut s = prior.si.clone().unwrap_or_else(|| SiState::new(&model.params.values, policy.si_xi, policy.si_c));
        s.xi = policy.si_xi;
        s.c = policy.si_c;
        s
    });

    let mut order: Vec<usize> = (0..all.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_losses = Vec::with_capacity(policy.epochs);
    let mut steps = 0usize;
    let mut batch: Vec<&S> = Vec::with_capacity(policy.batch_size);
    let mut delta = vec![0.0; model.params.len()];
    // Curvature of the quadratic penalties. Their part of each step is taken
    // implicitly, which keeps large λ or c stable at any learning rate.
    let mut stiffness = vec![0.0; model.params.len()];
    if let Some((a, _)) = ewc.as_ref() {
        for (k, f) in stiffness.iter_mut().zip(&a.fisher_diag) {
            *k += a.lambda * f;
        }
    }
    if let Some(s) = si.as_ref() {
        for (k, w) in stiffness.iter_mut().zip(&s.omega) {
            *k += 2.0 * s.c * w;
        }
    }
    for _ in 0..policy.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(policy.batch_size.max(1)) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| all[i]));
            let (l, g) = loss_and_grad(&model, &batch, ewc.as_ref().map(|(a, _)| a), si.as_ref())?;
            if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(LearnerError::NumericalDivergence);
            }
            for (((t, d), gi), k) in model.params.values.iter_mut().zip(delta.iter_mut()).zip(&g).zip(&stiffness) {
                *d = -policy.learning_rate * gi / (1.0 + policy.learning_rate * k);
                *t += *d;
            }
            if let Some(s) = si.as_mut() {
                si_step(s, &g, &delta)?;
            }
            epoch_loss += l;
            batches += 1;
            steps += 1;
        }
        epoch_losses.push(epoch_loss / batches as f64);
    }

    if let Some(s) = si.as_mut() {
        si_consolidate(s, &model.params.values)?;
    }
    let next_ewc = if loss.uses_ewc() {
        Some(EwcAnchor {
            theta_star: model.params.values.clone(),
            fisher_diag: fisher_diag(&model, &all, policy.fisher_samples)?,
            lambda: policy.lambda,
        })
    } else {
        None
    };

    Ok(UpdateOutcome {
        report: TrainingReport {
            epoch_losses,
            steps,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            expanded_from: (model.num_classes() > known).then_some(known),
            ewc_anchor: ewc.map(|(_, src)| src.to_string()),
        },
        model,
        state: ContinualState { ewc: next_ewc, si },
    })
}

/// Executes a queued update job on the training set its manifest describes.
///
/// The first `manifest.counts.new` records are new data; the rest are
/// rehearsal samples.
pub fn run_update(
    job: &mut UpdateJob,
    base: &Model,
    training_set: &[RequestRecord],
    prior: &ContinualState,
    seed: u64,
) -> Result<UpdateOutcome, LearnerError> {
    if job.status != JobStatus::Queued {
        return Err(LearnerError::InvalidTransition { from: job.status, to: JobStatus::Running });
    }
    let ids: Vec<u64> = training_set.iter().map(|r| r.record_id).collect();
    if content_digest(&ids) != job.manifest.content_digest {
        return Err(LearnerError::ManifestMismatch);
    }
    job.transition(JobStatus::Running)?;
    let split = job.manifest.counts.new.min(training_set.len());
    let (new_data, rehearsal) = training_set.split_at(split);
    match train(base, new_data, rehearsal, job.scenario, &job.loss_config, prior, seed) {
        Ok(out) => {
            job.transition(JobStatus::Finished)?;
            Ok(out)
        }
        Err(e) => {
            job.transition(JobStatus::Failed)?;
            Err(e)
        }
    }
}
