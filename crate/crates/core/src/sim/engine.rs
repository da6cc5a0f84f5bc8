use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::trace::{EventKind, SimEvent, SimTrace};
use super::{place_job, Cluster, InterferenceModel, SimError, Workload};
use crate::config::Placement;

const INFERENCE_WORKER: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrival(u64),
    ServiceDone(usize),
    JobArrival(usize),
    StepDone(usize),
}

#[derive(Default)]
struct WorkerState {
    queue: VecDeque<u64>,
    serving: Option<u64>,
    stepping: usize,
    deferred: Vec<usize>,
}

#[derive(Default)]
struct JobState {
    worker: Option<usize>,
    steps_done: usize,
    epoch_start: u64,
}

fn to_us(ms: f64) -> u64 {
    (ms * 1000.0).round() as u64
}

fn check(workload: &Workload, m: &InterferenceModel) -> Result<(), SimError> {
    let bad = |what: &str| Err(SimError::InvalidWorkload(what.to_string()));
    if !(workload.request_rate > 0.0 && workload.request_rate.is_finite()) {
        return bad("request_rate must be > 0");
    }
    if !(workload.duration_s > 0.0 && workload.duration_s.is_finite()) {
        return bad("duration must be > 0");
    }
    if !(workload.base_service_time_ms > 0.0 && workload.base_service_time_ms.is_finite()) {
        return bad("base service time must be > 0");
    }
    if !(m.kappa_infer >= 1.0 && m.kappa_train >= 1.0) {
        return bad("interference multipliers must be >= 1");
    }
    for j in &workload.jobs {
        if j.epochs == 0 || j.steps_per_epoch == 0 || !(j.step_time_ms > 0.0) || !(j.arrival_ms >= 0.0) {
            return Err(SimError::InvalidWorkload(format!("job {} is malformed", j.job_id)));
        }
    }
    Ok(())
}

struct Sim<'a> {
    workload: &'a Workload,
    policy: Placement,
    model: &'a InterferenceModel,
    cluster: Cluster,
    workers: Vec<WorkerState>,
    jobs: Vec<JobState>,
    pending: VecDeque<usize>,
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    arrivals: Vec<u64>,
    latencies: Vec<f64>,
    service: Vec<f64>,
    epochs: BTreeMap<u64, Vec<f64>>,
    events: Vec<SimEvent>,
}

impl Sim<'_> {
    fn schedule(&mut self, t: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((t, self.seq, ev)));
    }

    fn utilization(&mut self, t: u64, w: usize) -> f64 {
        let worker = &mut self.cluster.workers[w];
        let u = self.model.utilization(worker.inference_assigned, self.workers[w].stepping);
        worker.record_utilization(t, u);
        u
    }

    fn emit(&mut self, t: u64, kind: EventKind, worker: usize, id: u64, latency_us: Option<u64>) {
        let utilization = self.utilization(t, worker);
        self.events.push(SimEvent { t_us: t, kind, worker, id, latency_us, utilization });
    }

    fn start_service(&mut self, t: u64, w: usize) {
        let Some(r) = self.workers[w].queue.pop_front() else { return };
        let factor = self.model.kappa_infer.powi(self.workers[w].stepping as i32);
        let st = to_us(self.workload.base_service_time_ms * factor);
        self.workers[w].serving = Some(r);
        self.service[r as usize] = st as f64 / 1000.0;
        self.schedule(t + st, Ev::ServiceDone(w));
    }

    fn step_time(&self, j: usize, w: usize) -> u64 {
        let job = &self.workload.jobs[j];
        let factor = if self.cluster.workers[w].inference_assigned { self.model.kappa_train } else { 1.0 };
        to_us(job.step_time_ms * factor)
    }

    fn begin_step(&mut self, t: u64, j: usize) {
        let w = self.jobs[j].worker.expect("stepping job is placed");
        let ws = &self.workers[w];
        if self.policy == Placement::InferencePriority && (ws.serving.is_some() || !ws.queue.is_empty()) {
            self.workers[w].deferred.push(j);
            return;
        }
        self.workers[w].stepping += 1;
        let dt = self.step_time(j, w);
        self.schedule(t + dt, Ev::StepDone(j));
    }

    fn try_place(&mut self, t: u64) {
        while let Some(&j) = self.pending.front() {
            let Some(w) = place_job(self.policy, &self.cluster, &self.workload.jobs[j]) else { break };
            self.pending.pop_front();
            let id = self.workload.jobs[j].job_id;
            self.cluster.workers[w].resident_training_jobs.push(id);
            self.jobs[j].worker = Some(w);
            self.jobs[j].epoch_start = t;
            self.begin_step(t, j);
            self.emit(t, EventKind::JobStart, w, id, None);
        }
    }

    fn handle(&mut self, t: u64, ev: Ev) {
        match ev {
            Ev::Arrival(r) => {
                let w = INFERENCE_WORKER;
                self.workers[w].queue.push_back(r);
                self.emit(t, EventKind::RequestArrival, w, r, None);
                if self.workers[w].serving.is_none() {
                    self.start_service(t, w);
                }
            }
            Ev::ServiceDone(w) => {
                let r = self.workers[w].serving.take().expect("service completion without a request");
                let latency = t - self.arrivals[r as usize];
                self.latencies[r as usize] = latency as f64 / 1000.0;
                if self.workers[w].queue.is_empty() {
                    for j in std::mem::take(&mut self.workers[w].deferred) {
                        self.begin_step(t, j);
                    }
                } else {
                    self.start_service(t, w);
                }
                self.emit(t, EventKind::RequestDone, w, r, Some(latency));
            }
            Ev::JobArrival(j) => {
                self.pending.push_back(j);
                self.try_place(t);
            }
            Ev::StepDone(j) => {
                let w = self.jobs[j].worker.expect("stepping job is placed");
                let job = &self.workload.jobs[j];
                let (id, spe, total) = (job.job_id, job.steps_per_epoch, job.steps_per_epoch * job.epochs);
                self.workers[w].stepping -= 1;
                let state = &mut self.jobs[j];
                state.steps_done += 1;
                if state.steps_done % spe == 0 {
                    let dt = t - state.epoch_start;
                    state.epoch_start = t;
                    self.epochs.entry(id).or_default().push(dt as f64 / 1000.0);
                }
                if self.jobs[j].steps_done == total {
                    self.cluster.workers[w].resident_training_jobs.retain(|&x| x != id);
                    self.emit(t, EventKind::JobDone, w, id, None);
                    self.try_place(t);
                } else {
                    self.begin_step(t, j);
                    self.emit(t, EventKind::JobStep, w, id, None);
                }
            }
        }
    }
}

/// Runs one seeded simulation to completion.
///
/// Requests arriving within `duration_s` are all served; training jobs run
/// until finished or, if no worker ever becomes eligible, stay unplaced.
pub fn simulate(
    workload: &Workload,
    policy: Placement,
    interference: &InterferenceModel,
    seed: u64,
) -> Result<SimTrace, SimError> {
    let cluster = Cluster::new(workload.workers)?;
    check(workload, interference)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Exp::new(workload.request_rate / 1000.0).map_err(|e| SimError::InvalidWorkload(e.to_string()))?;
    let horizon = workload.duration_s * 1000.0;
    let mut arrivals = Vec::new();
    let mut t = 0.0;
    loop {
        t += gap.sample(&mut rng);
        if t > horizon {
            break;
        }
        arrivals.push(to_us(t));
    }

    let n = arrivals.len();
    let mut sim = Sim {
        workload,
        policy,
        model: interference,
        workers: (0..cluster.workers.len()).map(|_| WorkerState::default()).collect(),
        cluster,
        jobs: (0..workload.jobs.len()).map(|_| JobState::default()).collect(),
        pending: VecDeque::new(),
        heap: BinaryHeap::new(),
        seq: 0,
        arrivals,
        latencies: vec![0.0; n],
        service: vec![0.0; n],
        epochs: BTreeMap::new(),
        events: Vec::with_capacity(2 * n),
    };
    for w in 0..sim.cluster.workers.len() {
        sim.utilization(0, w);
    }
    for r in 0..n {
        sim.schedule(sim.arrivals[r], Ev::Arrival(r as u64));
    }
    for (j, job) in workload.jobs.iter().enumerate() {
        sim.schedule(to_us(job.arrival_ms), Ev::JobArrival(j));
    }
    while let Some(Reverse((t, _, ev))) = sim.heap.pop() {
        sim.handle(t, ev);
    }

    let unplaced_jobs = sim.pending.iter().map(|&j| workload.jobs[j].job_id).collect();
    Ok(SimTrace {
        events: sim.events,
        latencies_ms: sim.latencies,
        service_times_ms: sim.service,
        epoch_times_ms: sim.epochs,
        unplaced_jobs,
        workers: sim.cluster.workers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimJob;

    fn model() -> InterferenceModel {
        InterferenceModel { kappa_infer: 3.0, kappa_train: 1.31, u_infer_base: 0.35, u_train: 0.45 }
    }

    fn workload(workers: usize, jobs: Vec<SimJob>) -> Workload {
        Workload { request_rate: 100.0, duration_s: 5.0, base_service_time_ms: 2.0, workers, jobs }
    }

    fn long_job(arrival_ms: f64) -> SimJob {
        SimJob { job_id: 1, arrival_ms, epochs: 2, steps_per_epoch: 200, step_time_ms: 20.0 }
    }

    #[test]
    fn no_jobs_means_base_service_times() {
        let tr = simulate(&workload(1, vec![]), Placement::ColocateFifo, &model(), 1).unwrap();
        assert!(!tr.latencies_ms.is_empty());
        assert!(tr.service_times_ms.iter().all(|&s| s == 2.0));
        assert_eq!(tr.count(EventKind::RequestArrival), tr.count(EventKind::RequestDone));
    }

    #[test]
    fn coresident_job_triples_service_time() {
        // the job outlasts the traffic, so every request shares the worker
        let tr = simulate(&workload(1, vec![long_job(0.0)]), Placement::ColocateFifo, &model(), 2).unwrap();
        assert!(tr.service_times_ms.iter().all(|&s| s == 6.0));
    }

    #[test]
    fn epoch_time_scales_with_kappa_train() {
        let tr = simulate(&workload(1, vec![long_job(0.0)]), Placement::ColocateFifo, &model(), 3).unwrap();
        let epochs = &tr.epoch_times_ms[&1];
        assert_eq!(epochs.len(), 2);
        assert!(epochs.iter().all(|&e| (e - 200.0 * 26.2).abs() < 1e-9));
        let dedicated = simulate(&workload(2, vec![long_job(0.0)]), Placement::DedicatedWorker, &model(), 3).unwrap();
        assert!(dedicated.epoch_times_ms[&1].iter().all(|&e| (e - 4000.0).abs() < 1e-9));
    }

    #[test]
    fn dedicated_without_free_worker_leaves_job_unplaced() {
        let tr = simulate(&workload(1, vec![long_job(10.0)]), Placement::DedicatedWorker, &model(), 4).unwrap();
        assert_eq!(tr.unplaced_jobs, vec![1]);
        assert_eq!(tr.count(EventKind::JobStart), 0);
    }

    #[test]
    fn queued_job_starts_when_worker_frees() {
        let mut second = long_job(0.0);
        second.job_id = 2;
        second.steps_per_epoch = 10;
        let mut first = long_job(0.0);
        first.steps_per_epoch = 10;
        let tr = simulate(&workload(2, vec![first, second]), Placement::DedicatedWorker, &model(), 5).unwrap();
        let starts: Vec<_> = tr.events.iter().filter(|e| e.kind == EventKind::JobStart).map(|e| e.t_us).collect();
        let done1 = tr.events.iter().find(|e| e.kind == EventKind::JobDone && e.id == 1).unwrap().t_us;
        assert_eq!(starts, vec![0, done1]);
    }

    #[test]
    fn same_seed_same_digest() {
        let w = workload(2, vec![long_job(100.0)]);
        let a = simulate(&w, Placement::InferencePriority, &model(), 9).unwrap();
        let b = simulate(&w, Placement::InferencePriority, &model(), 9).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = simulate(&w, Placement::InferencePriority, &model(), 10).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn no_workers_is_an_error() {
        assert_eq!(simulate(&workload(0, vec![]), Placement::ColocateFifo, &model(), 1), Err(SimError::NoWorkers));
    }
}
