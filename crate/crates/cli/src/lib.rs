//! Subcommands of `driftctl`, callable without the argument parser.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use driftctl_core::config::{parse_config, ConfigError, Placement, ServiceConfig};
use driftctl_core::pipeline::{run_pipeline, CardView, HistoryRow, JobRecord, PipelineError, Service, ServiceOptions, ServiceStatus, TrainingMode};
use driftctl_core::sim::{simulate, InterferenceModel, SimError, SimTrace, Workload};
use driftctl_core::synthetic::{read_stream_csv, write_stream_csv, ShiftStream, StreamError};
use serde::{Deserialize, Serialize};

pub const REGISTRY_FILE: &str = "registry.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Config { path: PathBuf, source: ConfigError },
    #[error("{}: {source}", path.display())]
    Stream { path: PathBuf, source: StreamError },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{} already holds a run; pick an empty work directory", .0.display())]
    WorkdirInUse(PathBuf),
    #[error("no job {job} under {}", dir.display())]
    UnknownJob { job: u64, dir: PathBuf },
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data always serializes") + "\n"
}

pub fn load_config(path: &Path) -> Result<ServiceConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|source| CliError::Config { path: path.to_path_buf(), source })
}

pub fn load_stream(path: &Path, dim: usize) -> Result<Vec<driftctl_core::synthetic::StreamRow>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    read_stream_csv(file, dim).map_err(|source| CliError::Stream { path: path.to_path_buf(), source })
}

/// What `simulate` writes next to the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub policy: Placement,
    pub seed: u64,
    pub requests: usize,
    pub mean_latency_ms: f64,
    pub p95_ms: f64,
    /// The same seeded traffic with no training jobs.
    pub baseline_p95_ms: f64,
    pub p95_inflation: f64,
    pub epoch_times_ms: BTreeMap<u64, Vec<f64>>,
    pub unplaced_jobs: Vec<u64>,
    pub digest: String,
}

pub fn simulate_config(cfg: &ServiceConfig, policy: Option<Placement>, seed: u64) -> Result<(SimTrace, SimSummary), CliError> {
    let cluster = &cfg.cluster_policy;
    let policy = policy.unwrap_or(cluster.placement);
    let workload = Workload::from_policy(cluster);
    let model = InterferenceModel::from(&cluster.interference);
    let trace = simulate(&workload, policy, &model, seed)?;
    let baseline = simulate(&workload.without_jobs(), policy, &model, seed)?;
    let p95 = trace.p95()?;
    let baseline_p95 = baseline.p95()?;
    let summary = SimSummary {
        policy,
        seed,
        requests: trace.latencies_ms.len(),
        mean_latency_ms: trace.mean_latency(),
        p95_ms: p95,
        baseline_p95_ms: baseline_p95,
        p95_inflation: p95 / baseline_p95,
        epoch_times_ms: trace.epoch_times_ms.clone(),
        unplaced_jobs: trace.unplaced_jobs.clone(),
        digest: trace.digest(),
    };
    Ok((trace, summary))
}

/// `driftctl simulate`: writes `trace.csv` and `summary.json` into `out`.
pub fn simulate_cmd(config: &Path, policy: Option<Placement>, seed: u64, out: &Path) -> Result<SimSummary, CliError> {
    let cfg = load_config(config)?;
    let (trace, summary) = simulate_config(&cfg, policy, seed)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write(&out.join(TRACE_FILE), trace.to_csv())?;
    write(&out.join(SUMMARY_FILE), to_json(&summary))?;
    Ok(summary)
}

/// One job as stored under `jobs/<id>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFile {
    pub service: String,
    pub record: JobRecord,
    pub card: Option<CardView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub service: String,
    pub seed: u64,
    pub requests: usize,
    pub status: ServiceStatus,
    pub history: Vec<HistoryRow>,
    pub jobs: Vec<u64>,
    pub event_digest: String,
}

pub fn job_path(workdir: &Path, job: u64) -> PathBuf {
    workdir.join("jobs").join(format!("{job}.json"))
}

/// `driftctl run`: replays a stream through a fresh service. The registry,
/// event log and one file per update job land in `workdir`.
pub fn run_cmd(config: &Path, stream: &Path, workdir: &Path, seed: u64, mode: TrainingMode) -> Result<RunSummary, CliError> {
    let cfg = load_config(config)?;
    let rows = load_stream(stream, cfg.model_spec.input_dim)?;
    if workdir.join(REGISTRY_FILE).exists() {
        return Err(CliError::WorkdirInUse(workdir.to_path_buf()));
    }
    fs::create_dir_all(workdir.join("jobs")).map_err(io_err(workdir))?;
    let options = ServiceOptions {
        mode,
        seed,
        registry_path: Some(workdir.join(REGISTRY_FILE)),
        event_log_path: Some(workdir.join(EVENTS_FILE)),
    };
    let svc = run_pipeline(cfg, &rows, options)?;
    for (id, record) in svc.jobs() {
        let file = JobFile {
            service: svc.name().to_string(),
            record: record.clone(),
            card: record.version_id.and_then(|v| svc.card(v)),
        };
        write(&job_path(workdir, *id), to_json(&file))?;
    }
    let summary = summarize(&svc, seed, rows.len());
    write(&workdir.join(RUN_FILE), to_json(&summary))?;
    Ok(summary)
}

fn summarize(svc: &Service, seed: u64, requests: usize) -> RunSummary {
    RunSummary {
        service: svc.name().to_string(),
        seed,
        requests,
        status: svc.status().clone(),
        history: svc.history(),
        jobs: svc.jobs().keys().copied().collect(),
        event_digest: svc.events().digest(),
    }
}

pub fn load_job(workdir: &Path, job: u64) -> Result<JobFile, CliError> {
    let path = job_path(workdir, job);
    if !path.exists() {
        return Err(CliError::UnknownJob { job, dir: workdir.to_path_buf() });
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Corrupt { path, message: e.to_string() })
}

/// The serialized name of a unit enum variant.
fn name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        _ => "?".into(),
    }
}

/// Human-readable account of one job.
pub fn render_report(j: &JobFile) -> String {
    use std::fmt::Write as _;
    let r = &j.record;
    let mut s = String::new();
    let _ = writeln!(s, "job {} on {} ({}, base v{})", r.job.job_id, j.service, name(&r.job.scenario), r.job.base_version);
    let t = &r.trigger;
    let _ = writeln!(
        s,
        "trigger: window {} magnitude {:.4} min p {:.3e} eddm {} new-class share {:.3}",
        t.window_id,
        t.magnitude,
        t.min_p_value(),
        name(&t.eddm_level),
        t.new_class_fraction
    );
    let m = &r.job.manifest;
    let _ = writeln!(s, "training set: {} records, classes {:?}", m.record_ids.len(), m.selection.classes);
    let lc = &r.job.loss_config;
    let _ = writeln!(s, "loss: {} lambda {} c {} lr {} epochs {}", name(&lc.loss), lc.lambda, lc.si_c, lc.learning_rate, lc.epochs);
    match &r.training {
        Some(tr) => {
            let losses: Vec<String> = tr.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
            let _ = writeln!(s, "training: {} steps, epoch losses [{}]", tr.steps, losses.join(", "));
        }
        None => s.push_str("training: not finished\n"),
    }
    if let Some(e) = &r.error {
        let _ = writeln!(s, "error: {e}");
    }
    match &j.card {
        Some(c) => {
            let v = &c.card.validation;
            let _ = writeln!(
                s,
                "version v{}: {}, verdict {} (holdout acc {:.4} vs incumbent {:.4})",
                c.version_id,
                name(&c.status),
                name(&v.decision), v.holdout_acc_new, v.holdout_acc_old
            );
            for rule in &v.reasons {
                let mark = if rule.passed { "pass" } else { "fail" };
                let _ = writeln!(s, "  {:<24} {mark}  {}", rule.rule, rule.detail);
            }
            let b = &c.card.benchmark;
            let bwt = b.bwt.map_or("n/a".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(s, "benchmark: final acc {:.4} bwt {bwt}", b.final_acc);
            let _ = writeln!(s, "query: {}", c.query);
        }
        None => s.push_str("no version produced\n"),
    }
    s
}

/// `driftctl synth`: writes a seeded stream CSV, with new classes from
/// `shift_at` on unless the stream is stationary.
pub fn synth_cmd(dim: usize, len: usize, shift_at: Option<usize>, seed: u64, out: &Path) -> Result<(), CliError> {
    let spec = match shift_at {
        Some(at) => ShiftStream::new_classes(dim, len, at),
        None => ShiftStream::stationary(dim, len),
    };
    let rows = spec.generate(seed);
    let file = fs::File::create(out).map_err(io_err(out))?;
    write_stream_csv(file, &rows).map_err(|source| CliError::Stream { path: out.to_path_buf(), source })
}

/// Bootstraps a service for `serve` from the first window of labeled rows.
pub fn bootstrap_service(config: &Path, history: &Path, seed: u64, mode: TrainingMode) -> Result<Service, CliError> {
    let cfg = load_config(config)?;
    let rows = load_stream(history, cfg.model_spec.input_dim)?;
    let n = cfg.drift_policy.window_size.min(rows.len());
    Ok(Service::bootstrap(cfg, &rows[..n], ServiceOptions { mode, seed, ..ServiceOptions::default() })?)
}
