//! Discrete-event simulation of inference and training sharing workers.
//!
//! Time is kept in integer microseconds. Requests arrive as a seeded Poisson
//! process and are served FIFO on the inference worker (worker 0). Training
//! jobs are placed by a [`Placement`] policy and advance step by step.
//! Interference is multiplicative and local to a worker: each training job
//! stepping on the inference worker multiplies request service time by
//! `kappa_infer`, and a job sharing a worker with inference has its step time
//! multiplied by `kappa_train`.

mod engine;
mod trace;

use serde::{Deserialize, Serialize};

use crate::config::{ClusterPolicy, InterferenceConfig, Placement};
use crate::learner::UpdateJob;
use crate::par::{self, Exec};

pub use engine::simulate;
pub use trace::{EventKind, SimEvent, SimTrace};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("the cluster has no workers")]
    NoWorkers,
    #[error("invalid workload: {0}")]
    InvalidWorkload(String),
    #[error("percentile of an empty list")]
    EmptyList,
    #[error("percentile rank {0} is outside (0, 1)")]
    InvalidRank(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceModel {
    pub kappa_infer: f64,
    pub kappa_train: f64,
    pub u_infer_base: f64,
    pub u_train: f64,
}

impl From<&InterferenceConfig> for InterferenceModel {
    fn from(c: &InterferenceConfig) -> Self {
        Self {
            kappa_infer: c.kappa_infer,
            kappa_train: c.kappa_train,
            u_infer_base: c.u_infer_base,
            u_train: c.u_train,
        }
    }
}

impl InterferenceModel {
    /// Utilization of a worker, clamped to `[0, 1]`.
    pub fn utilization(&self, inference: bool, training_jobs: usize) -> f64 {
        let u = if inference { self.u_infer_base } else { 0.0 } + self.u_train * training_jobs as f64;
        u.clamp(0.0, 1.0)
    }
}

/// A training job as the simulator sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimJob {
    pub job_id: u64,
    pub arrival_ms: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Step time on a worker without inference load.
    pub step_time_ms: f64,
}

impl SimJob {
    pub fn from_update(job: &UpdateJob, arrival_ms: f64, step_time_ms: f64) -> Self {
        let epochs = job.loss_config.epochs.max(1);
        let steps = job.resource_demand.relative_cost.round().max(1.0) as usize;
        Self {
            job_id: job.job_id,
            arrival_ms,
            epochs,
            steps_per_epoch: steps.div_ceil(epochs),
            step_time_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    /// Requests per second.
    pub request_rate: f64,
    /// Seconds of request traffic.
    pub duration_s: f64,
    pub base_service_time_ms: f64,
    pub workers: usize,
    pub jobs: Vec<SimJob>,
}

impl Workload {
    pub fn from_policy(policy: &ClusterPolicy) -> Self {
        let w = &policy.workload;
        let jobs = (0..w.training_jobs)
            .map(|i| SimJob {
                job_id: i as u64 + 1,
                arrival_ms: w.job_arrival + w.job_interval * i as f64,
                epochs: w.job_epochs,
                steps_per_epoch: w.job_steps_per_epoch,
                step_time_ms: policy.interference.training_step_time,
            })
            .collect();
        Self {
            request_rate: policy.request_rate,
            duration_s: w.duration,
            base_service_time_ms: policy.base_service_time,
            workers: policy.workers,
            jobs,
        }
    }

    pub fn without_jobs(&self) -> Self {
        Self { jobs: Vec::new(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub worker_id: usize,
    pub inference_assigned: bool,
    pub resident_training_jobs: Vec<u64>,
    /// `(t_us, utilization)` with strictly increasing timestamps.
    pub utilization_trace: Vec<(u64, f64)>,
}

impl Worker {
    pub fn new(worker_id: usize, inference_assigned: bool) -> Self {
        Self { worker_id, inference_assigned, resident_training_jobs: Vec::new(), utilization_trace: Vec::new() }
    }

    pub(crate) fn record_utilization(&mut self, t_us: u64, u: f64) {
        match self.utilization_trace.last_mut() {
            Some(last) if last.0 == t_us => last.1 = u,
            Some(last) if last.1 == u => {}
            _ => self.utilization_trace.push((t_us, u)),
        }
    }
}

/// Worker set with inference pinned to worker 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub workers: Vec<Worker>,
}

impl Cluster {
    pub fn new(workers: usize) -> Result<Self, SimError> {
        if workers == 0 {
            return Err(SimError::NoWorkers);
        }
        Ok(Self { workers: (0..workers).map(|i| Worker::new(i, i == 0)).collect() })
    }
}

/// Chooses a worker for `job`, or `None` if it must wait.
pub fn place_job(policy: Placement, cluster: &Cluster, _job: &SimJob) -> Option<usize> {
    match policy {
        Placement::ColocateFifo | Placement::InferencePriority => cluster
            .workers
            .iter()
            .min_by_key(|w| (w.resident_training_jobs.len(), w.worker_id))
            .map(|w| w.worker_id),
        Placement::DedicatedWorker => cluster
            .workers
            .iter()
            .find(|w| !w.inference_assigned && w.resident_training_jobs.is_empty())
            .map(|w| w.worker_id),
    }
}

/// Nearest-rank percentile: the value at 1-based rank `ceil(p * N)`.
pub fn percentile(latencies: &[f64], p: f64) -> Result<f64, SimError> {
    if latencies.is_empty() {
        return Err(SimError::EmptyList);
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(SimError::InvalidRank(p));
    }
    let mut sorted = latencies.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (p * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// One point of a parameter sweep.
#[derive(Debug, Clone)]
pub struct SimCase {
    pub workload: Workload,
    pub policy: Placement,
    pub interference: InterferenceModel,
    pub seed: u64,
}

/// Runs independent simulations, each single-threaded, in input order.
pub fn sweep(exec: Exec, cases: &[SimCase]) -> Vec<Result<SimTrace, SimError>> {
    par::map_with(exec, cases, |c| simulate(&c.workload, c.policy, &c.interference, c.seed))
}
