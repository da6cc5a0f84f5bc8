use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{percentile, SimError, Worker};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RequestArrival,
    RequestDone,
    JobStart,
    JobStep,
    JobDone,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::RequestArrival => "request_arrival",
            EventKind::RequestDone => "request_done",
            EventKind::JobStart => "job_start",
            EventKind::JobStep => "job_step",
            EventKind::JobDone => "job_done",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t_us: u64,
    pub kind: EventKind,
    pub worker: usize,
    /// Request id for request events, job id for job events.
    pub id: u64,
    pub latency_us: Option<u64>,
    /// Utilization of `worker` right after the event.
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub events: Vec<SimEvent>,
    /// Per-request latency in ms, indexed by request id.
    pub latencies_ms: Vec<f64>,
    pub service_times_ms: Vec<f64>,
    pub epoch_times_ms: BTreeMap<u64, Vec<f64>>,
    /// Jobs that never got a worker.
    pub unplaced_jobs: Vec<u64>,
    pub workers: Vec<Worker>,
}

fn fmt_us(out: &mut String, us: u64) {
    let _ = write!(out, "{}.{:03}", us / 1000, us % 1000);
}

impl SimTrace {
    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn p95(&self) -> Result<f64, SimError> {
        percentile(&self.latencies_ms, 0.95)
    }

    pub fn mean_latency(&self) -> f64 {
        if self.latencies_ms.is_empty() {
            return 0.0;
        }
        self.latencies_ms.iter().sum::<f64>() / self.latencies_ms.len() as f64
    }

    /// `t_ms,kind,worker,latency_ms,utilization`, one row per event.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,kind,worker,latency_ms,utilization\n");
        for e in &self.events {
            fmt_us(&mut out, e.t_us);
            let _ = write!(out, ",{},{},", e.kind.as_str(), e.worker);
            if let Some(l) = e.latency_us {
                fmt_us(&mut out, l);
            }
            let _ = writeln!(out, ",{:.4}", e.utilization);
        }
        out
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }
}
