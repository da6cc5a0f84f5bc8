//! Service configuration: a strict TOML schema with documented defaults.
//!
//! Every section except `service_name` and `model_spec` may be omitted, in
//! which case the defaults below apply. Unknown keys are rejected. See
//! `docs/config.md` for the full schema.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfigErrorKind {
    Syntax,
    TypeMismatch,
    UnknownKey,
    MissingField,
    OutOfRange,
}

impl fmt::Display for ConfigErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConfigErrorKind::Syntax => "syntax",
            ConfigErrorKind::TypeMismatch => "type-mismatch",
            ConfigErrorKind::UnknownKey => "unknown-key",
            ConfigErrorKind::MissingField => "missing-field",
            ConfigErrorKind::OutOfRange => "out-of-range",
        };
        f.write_str(s)
    }
}

/// A rejected configuration. `line` is 1-based when it could be located.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("config error at {}: field `{field}` ({kind}): {message}", line.map(|l| format!("line {l}")).unwrap_or_else(|| "unknown line".into()))]
pub struct ConfigError {
    pub line: Option<usize>,
    pub field: String,
    pub kind: ConfigErrorKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub service_name: String,
    pub model_spec: ModelSpec,
    #[serde(default)]
    pub drift_policy: DriftPolicy,
    #[serde(default)]
    pub data_policy: DataPolicy,
    #[serde(default)]
    pub cl_policy: ClPolicy,
    #[serde(default)]
    pub validation_policy: ValidationPolicy,
    #[serde(default)]
    pub cluster_policy: ClusterPolicy,
}

/// Classifier dimensions. `hidden_dim = 0` selects logistic regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Derived from the dimensions. Checked against them when given.
    #[serde(default)]
    pub param_count: usize,
}

impl ModelSpec {
    pub fn derived_param_count(&self) -> usize {
        if self.hidden_dim == 0 {
            self.num_classes * (self.input_dim + 1)
        } else {
            self.hidden_dim * (self.input_dim + 1) + self.num_classes * (self.hidden_dim + 1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Ks,
    Eddm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriftPolicy {
    pub detectors: BTreeSet<DetectorKind>,
    pub window_size: usize,
    pub check_interval: usize,
    /// KS p-value threshold, Bonferroni-split across the monitored marginals.
    pub magnitude_threshold: f64,
    /// Errors EDDM sees before it may leave Stable. At low error rates a
    /// short warmup records an inflated peak and later noise reads as drift.
    pub min_errors_warmup: usize,
    pub eddm_warning: f64,
    pub eddm_drift: f64,
    /// Consecutive firing checks needed before an update is started.
    pub confirm_checks: usize,
}

impl Default for DriftPolicy {
    fn default() -> Self {
        Self {
            detectors: [DetectorKind::Ks, DetectorKind::Eddm].into_iter().collect(),
            window_size: 500,
            check_interval: 100,
            magnitude_threshold: 0.05,
            min_errors_warmup: 100,
            eddm_warning: 0.95,
            eddm_drift: 0.90,
            confirm_checks: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPolicy {
    pub cache_capacity: usize,
    /// Records served with confidence below this are queued for labeling.
    pub label_confidence_threshold: f64,
}

impl Default for DataPolicy {
    fn default() -> Self {
        Self { cache_capacity: 10_000, label_confidence_threshold: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "ewc")]
    Ewc,
    #[serde(rename = "si")]
    Si,
    #[serde(rename = "rehearsal")]
    Rehearsal,
    #[serde(rename = "ewc+rehearsal")]
    EwcRehearsal,
}

impl LossKind {
    pub fn uses_ewc(self) -> bool {
        matches!(self, LossKind::Ewc | LossKind::EwcRehearsal)
    }

    pub fn uses_si(self) -> bool {
        matches!(self, LossKind::Si)
    }

    pub fn uses_rehearsal(self) -> bool {
        matches!(self, LossKind::Rehearsal | LossKind::EwcRehearsal)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioThresholds {
    pub tau_nc: f64,
    /// `1.0` disables the offline-retrain override.
    pub tau_offline: f64,
}

impl Default for ScenarioThresholds {
    fn default() -> Self {
        Self { tau_nc: 0.5, tau_offline: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClPolicy {
    pub loss: LossKind,
    pub lambda: f64,
    pub si_c: f64,
    pub si_xi: f64,
    pub rehearsal_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Samples used for the diagonal Fisher estimate.
    pub fisher_samples: usize,
    pub scenario_thresholds: ScenarioThresholds,
}

impl Default for ClPolicy {
    fn default() -> Self {
        Self {
            loss: LossKind::EwcRehearsal,
            lambda: 100.0,
            si_c: 0.1,
            si_xi: 0.1,
            rehearsal_ratio: 0.5,
            epochs: 5,
            learning_rate: 0.05,
            batch_size: 32,
            fisher_samples: 200,
            scenario_thresholds: ScenarioThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidationPolicy {
    pub holdout_fraction: f64,
    pub max_accuracy_drop: f64,
    pub min_accuracy: f64,
    pub ab_significance: f64,
    pub require_manual_approval: bool,
}

impl Default for ValidationPolicy {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            max_accuracy_drop: 0.05,
            min_accuracy: 0.5,
            ab_significance: 0.05,
            require_manual_approval: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    ColocateFifo,
    DedicatedWorker,
    InferencePriority,
}

impl std::str::FromStr for Placement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "colocate_fifo" => Ok(Placement::ColocateFifo),
            "dedicated_worker" => Ok(Placement::DedicatedWorker),
            "inference_priority" => Ok(Placement::InferencePriority),
            other => Err(format!("unknown placement policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterferenceConfig {
    pub kappa_infer: f64,
    pub kappa_train: f64,
    pub u_infer_base: f64,
    pub u_train: f64,
    /// Modeled time of one SGD step on an otherwise idle worker, in ms.
    pub training_step_time: f64,
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            kappa_infer: 3.0,
            kappa_train: 1.31,
            u_infer_base: 0.35,
            u_train: 0.45,
            training_step_time: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterPolicy {
    pub workers: usize,
    pub placement: Placement,
    /// Requests per second.
    pub request_rate: f64,
    /// Inference service time in ms with no co-resident training.
    pub base_service_time: f64,
    pub interference: InterferenceConfig,
    pub workload: WorkloadConfig,
}

/// Training workload used by the cluster simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadConfig {
    /// Simulated seconds of request traffic.
    pub duration: f64,
    pub training_jobs: usize,
    /// Arrival of the first training job, in ms.
    pub job_arrival: f64,
    /// Gap between consecutive training job arrivals, in ms.
    pub job_interval: f64,
    pub job_epochs: usize,
    pub job_steps_per_epoch: usize,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        Self {
            duration: 60.0,
            training_jobs: 1,
            job_arrival: 0.0,
            job_interval: 0.0,
            job_epochs: 5,
            job_steps_per_epoch: 500,
        }
    }
}

impl Default for ClusterPolicy {
    fn default() -> Self {
        Self {
            workers: 2,
            placement: Placement::ColocateFifo,
            request_rate: 100.0,
            base_service_time: 2.0,
            interference: InterferenceConfig::default(),
            workload: WorkloadConfig::default(),
        }
    }
}

/// Parses and validates a configuration file.
pub fn parse_config(text: &str) -> Result<ServiceConfig, ConfigError> {
    let mut cfg: ServiceConfig = toml::from_str(text).map_err(|e| de_error(text, &e))?;
    cfg.validate().map_err(|mut e| {
        e.line = locate(text, &e.field);
        e
    })?;
    cfg.model_spec.param_count = cfg.model_spec.derived_param_count();
    Ok(cfg)
}

pub fn serialize_config(cfg: &ServiceConfig) -> String {
    toml::to_string_pretty(cfg).expect("config is always representable as TOML")
}

impl ServiceConfig {
    /// A config with every optional section at its default.
    pub fn with_defaults(service_name: &str, model_spec: ModelSpec) -> Self {
        let mut cfg = Self {
            service_name: service_name.to_string(),
            model_spec,
            drift_policy: DriftPolicy::default(),
            data_policy: DataPolicy::default(),
            cl_policy: ClPolicy::default(),
            validation_policy: ValidationPolicy::default(),
            cluster_policy: ClusterPolicy::default(),
        };
        cfg.model_spec.param_count = cfg.model_spec.derived_param_count();
        cfg
    }

    /// Checks every range invariant. `line` is left unset.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model_spec;
        if self.service_name.trim().is_empty() {
            return Err(range("service_name", "must be non-empty"));
        }
        count("input_dim", m.input_dim)?;
        count("num_classes", m.num_classes)?;
        if m.param_count != 0 && m.param_count != m.derived_param_count() {
            return Err(range(
                "param_count",
                &format!("{} does not match dimensions ({})", m.param_count, m.derived_param_count()),
            ));
        }

        let d = &self.drift_policy;
        if d.detectors.is_empty() {
            return Err(range("detectors", "at least one detector is required"));
        }
        count("window_size", d.window_size)?;
        count("check_interval", d.check_interval)?;
        count("confirm_checks", d.confirm_checks)?;
        fraction("magnitude_threshold", d.magnitude_threshold)?;
        count("min_errors_warmup", d.min_errors_warmup)?;
        fraction("eddm_warning", d.eddm_warning)?;
        fraction("eddm_drift", d.eddm_drift)?;
        if d.eddm_drift > d.eddm_warning {
            return Err(range("eddm_drift", "must not exceed eddm_warning"));
        }

        count("cache_capacity", self.data_policy.cache_capacity)?;
        fraction("label_confidence_threshold", self.data_policy.label_confidence_threshold)?;

        let c = &self.cl_policy;
        nonneg("lambda", c.lambda)?;
        nonneg("si_c", c.si_c)?;
        positive("si_xi", c.si_xi)?;
        fraction("rehearsal_ratio", c.rehearsal_ratio)?;
        count("epochs", c.epochs)?;
        positive("learning_rate", c.learning_rate)?;
        count("batch_size", c.batch_size)?;
        count("fisher_samples", c.fisher_samples)?;
        open_unit("tau_nc", c.scenario_thresholds.tau_nc)?;
        open_unit("tau_offline", c.scenario_thresholds.tau_offline)?;

        let v = &self.validation_policy;
        fraction("holdout_fraction", v.holdout_fraction)?;
        fraction("max_accuracy_drop", v.max_accuracy_drop)?;
        fraction("min_accuracy", v.min_accuracy)?;
        fraction("ab_significance", v.ab_significance)?;

        let k = &self.cluster_policy;
        count("workers", k.workers)?;
        positive("request_rate", k.request_rate)?;
        positive("base_service_time", k.base_service_time)?;
        let i = &k.interference;
        if !(i.kappa_infer >= 1.0 && i.kappa_infer.is_finite()) {
            return Err(range("kappa_infer", "must be >= 1"));
        }
        if !(i.kappa_train >= 1.0 && i.kappa_train.is_finite()) {
            return Err(range("kappa_train", "must be >= 1"));
        }
        fraction("u_infer_base", i.u_infer_base)?;
        fraction("u_train", i.u_train)?;
        positive("training_step_time", i.training_step_time)?;
        let w = &k.workload;
        positive("duration", w.duration)?;
        nonneg("job_arrival", w.job_arrival)?;
        nonneg("job_interval", w.job_interval)?;
        count("job_epochs", w.job_epochs)?;
        count("job_steps_per_epoch", w.job_steps_per_epoch)?;
        Ok(())
    }
}

fn range(field: &str, message: &str) -> ConfigError {
    ConfigError {
        line: None,
        field: field.to_string(),
        kind: ConfigErrorKind::OutOfRange,
        message: message.to_string(),
    }
}

fn count(field: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 { Ok(()) } else { Err(range(field, "must be >= 1")) }
}

fn fraction(field: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(range(field, &format!("{v} is outside [0, 1]")))
    }
}

fn open_unit(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(range(field, &format!("{v} is outside (0, 1]")))
    }
}

fn nonneg(field: &str, v: f64) -> Result<(), ConfigError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range(field, &format!("{v} must be a finite value >= 0")))
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(range(field, &format!("{v} must be a finite value > 0")))
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn de_error(text: &str, err: &toml::de::Error) -> ConfigError {
    let message = err.message().to_string();
    let line = err.span().map(|s| line_of(text, s.start));
    let kind = if message.contains("unknown field") {
        ConfigErrorKind::UnknownKey
    } else if message.contains("missing field") {
        ConfigErrorKind::MissingField
    } else if message.contains("invalid type") || message.contains("invalid value") || message.contains("unknown variant") {
        ConfigErrorKind::TypeMismatch
    } else {
        ConfigErrorKind::Syntax
    };
    let field = match kind {
        ConfigErrorKind::UnknownKey | ConfigErrorKind::MissingField => backticked(&message),
        _ => None,
    }
    .or_else(|| line.and_then(|l| key_on_line(text, l)))
    .unwrap_or_default();
    ConfigError { line, field, kind, message }
}

fn backticked(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

fn key_on_line(text: &str, line: usize) -> Option<String> {
    let l = text.lines().nth(line - 1)?;
    let (key, _) = l.split_once('=')?;
    Some(key.trim().trim_matches('"').to_string())
}

/// Finds the first line assigning `field`, either as a key or as a table.
fn locate(text: &str, field: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        if let Some((key, _)) = l.split_once('=') {
            key.trim() == field
        } else {
            l.trim_start_matches('[').trim_end_matches(']').rsplit('.').next() == Some(field)
        }
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
service_name = "images"

[model_spec]
input_dim = 10
num_classes = 2
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.drift_policy.window_size, 500);
        assert_eq!(cfg.drift_policy.check_interval, 100);
        assert_eq!(cfg.drift_policy.magnitude_threshold, 0.05);
        assert_eq!(cfg.drift_policy.min_errors_warmup, 100);
        assert_eq!(cfg.cl_policy.lambda, 100.0);
        assert_eq!(cfg.cl_policy.epochs, 5);
        assert_eq!(cfg.cl_policy.si_c, 0.1);
        assert_eq!(cfg.cl_policy.si_xi, 0.1);
        assert_eq!(cfg.cl_policy.rehearsal_ratio, 0.5);
        assert_eq!(cfg.cl_policy.learning_rate, 0.05);
        assert_eq!(cfg.cl_policy.batch_size, 32);
        assert_eq!(cfg.data_policy.cache_capacity, 10_000);
        assert_eq!(cfg.model_spec.param_count, 22);
        assert_eq!(cfg, ServiceConfig::with_defaults("images", cfg.model_spec.clone()));
    }

    #[test]
    fn out_of_range_threshold_is_rejected_with_line() {
        let text = format!("{MINIMAL}\n[drift_policy]\nmagnitude_threshold = 1.5\n");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.field, "magnitude_threshold");
        assert_eq!(err.kind, ConfigErrorKind::OutOfRange);
        assert_eq!(err.line, Some(9));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = format!("{MINIMAL}\n[cl_policy]\nmomentum = 0.9\n");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.kind, ConfigErrorKind::UnknownKey);
        assert_eq!(err.field, "momentum");
        assert_eq!(err.line, Some(9));
    }

    #[test]
    fn type_mismatch_names_the_key() {
        let text = format!("{MINIMAL}\n[cl_policy]\nepochs = \"five\"\n");
        let err = parse_config(&text).unwrap_err();
        assert_eq!(err.kind, ConfigErrorKind::TypeMismatch);
        assert_eq!(err.field, "epochs");
    }

    #[test]
    fn missing_model_spec_is_reported() {
        let err = parse_config("service_name = \"x\"\n").unwrap_err();
        assert_eq!(err.kind, ConfigErrorKind::MissingField);
        assert_eq!(err.field, "model_spec");
    }

    #[test]
    fn mismatched_param_count_is_rejected() {
        let text = MINIMAL.replace("num_classes = 2", "num_classes = 2\nparam_count = 7");
        assert_eq!(parse_config(&text).unwrap_err().field, "param_count");
    }

    #[test]
    fn zero_counts_and_bad_rates_are_rejected() {
        for (section, key, value) in [
            ("cl_policy", "epochs", "0"),
            ("cl_policy", "learning_rate", "0.0"),
            ("cl_policy", "si_xi", "0.0"),
            ("cluster_policy", "workers", "0"),
            ("cl_policy.scenario_thresholds", "tau_nc", "0.0"),
        ] {
            let text = format!("{MINIMAL}\n[{section}]\n{key} = {value}\n");
            let err = parse_config(&text).unwrap_err();
            assert_eq!(err.field, key, "{section}.{key}");
        }
    }

    #[test]
    fn serialize_round_trips() {
        let mut cfg = parse_config(MINIMAL).unwrap();
        cfg.cl_policy.loss = LossKind::Si;
        cfg.cluster_policy.placement = Placement::InferencePriority;
        cfg.drift_policy.detectors = [DetectorKind::Ks].into_iter().collect();
        let text = serialize_config(&cfg);
        assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
