//! Drift detection: per-marginal two-sample KS tests and EDDM.

mod calibrate;
mod eddm;
mod ks;

pub use calibrate::{gaussian_window, trigger_rate};
pub use eddm::{DriftLevel, EddmState};
pub use ks::{kolmogorov_q, ks_p_value, ks_statistic, ks_statistic_sorted, ks_test, KsResult};

use serde::{Deserialize, Serialize};

use crate::config::{DetectorKind, DriftPolicy};
use crate::data::{ClassId, RequestRecord};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DriftError {
    #[error("sample is empty")]
    EmptySample,
    #[error("sample contains a non-finite value")]
    NonFinite,
    #[error("stream index {got} does not follow {last}")]
    NonMonotoneIndex { last: u64, got: u64 },
    #[error("feature dimension mismatch: reference has {reference}, current has {current}")]
    DimensionMismatch { reference: usize, current: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub window_id: u64,
    /// Max over monitored marginals of `1 - p`.
    pub magnitude: f64,
    /// One entry per feature, then one for the confidence score.
    pub per_feature_ks: Vec<KsResult>,
    pub eddm_level: DriftLevel,
    pub new_class_fraction: f64,
    pub triggered: bool,
}

impl DriftReport {
    pub fn min_p_value(&self) -> f64 {
        self.per_feature_ks.iter().map(|k| k.p_value).fold(1.0, f64::min)
    }
}

/// Bonferroni-corrected per-marginal threshold.
pub fn corrected_threshold(policy: &DriftPolicy, marginals: usize) -> f64 {
    policy.magnitude_threshold / marginals.max(1) as f64
}

/// Compares `current` against `reference` marginal by marginal.
///
/// `eddm_level` is the error-rate detector's level over the same period and
/// `known_classes` the number of classes the deployed model can predict.
pub fn evaluate_window(
    window_id: u64,
    reference: &[RequestRecord],
    current: &[RequestRecord],
    policy: &DriftPolicy,
    eddm_level: DriftLevel,
    known_classes: usize,
) -> Result<DriftReport, DriftError> {
    evaluate_window_with(Exec::default(), window_id, reference, current, policy, eddm_level, known_classes)
}

/// [`evaluate_window`] with an explicit execution mode for the per-marginal
/// tests.
pub fn evaluate_window_with(
    exec: Exec,
    window_id: u64,
    reference: &[RequestRecord],
    current: &[RequestRecord],
    policy: &DriftPolicy,
    eddm_level: DriftLevel,
    known_classes: usize,
) -> Result<DriftReport, DriftError> {
    if reference.is_empty() || current.is_empty() {
        return Err(DriftError::EmptySample);
    }
    let dim = reference[0].features.len();
    for r in reference.iter().chain(current) {
        if r.features.len() != dim {
            return Err(DriftError::DimensionMismatch { reference: dim, current: r.features.len() });
        }
    }

    let use_ks = policy.detectors.contains(&DetectorKind::Ks);
    let use_eddm = policy.detectors.contains(&DetectorKind::Eddm);

    let per_feature_ks = if use_ks {
        let marginal = |rows: &[RequestRecord], j: usize| -> Vec<f64> {
            rows.iter().map(|r| if j < dim { r.features[j] } else { r.confidence }).collect()
        };
        par::map_range_with(exec, dim + 1, |j| ks_test(&marginal(reference, j), &marginal(current, j)))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?
    } else {
        Vec::new()
    };

    let magnitude = per_feature_ks.iter().map(|k| 1.0 - k.p_value).fold(0.0, f64::max);
    let alpha = corrected_threshold(policy, per_feature_ks.len());
    let ks_fired = per_feature_ks.iter().any(|k| k.p_value <= alpha);
    let eddm_fired = use_eddm && eddm_level == DriftLevel::Drift;

    let labeled: Vec<ClassId> = current.iter().filter_map(|r| r.label).collect();
    let new_class_fraction = if labeled.is_empty() {
        0.0
    } else {
        labeled.iter().filter(|&&l| l as usize >= known_classes).count() as f64 / labeled.len() as f64
    };

    Ok(DriftReport {
        window_id,
        magnitude,
        per_feature_ks,
        eddm_level: if use_eddm { eddm_level } else { DriftLevel::Stable },
        new_class_fraction,
        triggered: ks_fired || eddm_fired,
    })
}

/// Error signal fed to EDDM: a wrong labeled prediction, or a low-confidence
/// unlabeled one.
pub fn error_signal(record: &RequestRecord) -> bool {
    match record.label {
        Some(label) => label != record.prediction,
        None => record.confidence < 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSource;

    fn rec(id: u64, features: Vec<f64>, label: Option<ClassId>) -> RequestRecord {
        RequestRecord {
            record_id: id,
            arrival: id,
            features,
            prediction: 0,
            confidence: 0.8,
            label,
            label_source: LabelSource::Online,
        }
    }

    #[test]
    fn empty_reference_is_rejected() {
        let cur = vec![rec(1, vec![0.0], None)];
        let err = evaluate_window(0, &[], &cur, &DriftPolicy::default(), DriftLevel::Stable, 2).unwrap_err();
        assert_eq!(err, DriftError::EmptySample);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let a = vec![rec(1, vec![0.0], None)];
        let b = vec![rec(2, vec![0.0, 1.0], None)];
        let err = evaluate_window(0, &a, &b, &DriftPolicy::default(), DriftLevel::Stable, 2).unwrap_err();
        assert_eq!(err, DriftError::DimensionMismatch { reference: 1, current: 2 });
    }

    #[test]
    fn identical_windows_do_not_trigger() {
        let a: Vec<_> = (0..50).map(|i| rec(i, vec![i as f64, -(i as f64)], Some(0))).collect();
        let r = evaluate_window(3, &a, &a, &DriftPolicy::default(), DriftLevel::Stable, 2).unwrap();
        assert_eq!(r.window_id, 3);
        assert_eq!(r.per_feature_ks.len(), 3);
        assert_eq!(r.magnitude, 0.0);
        assert!(!r.triggered);
        assert_eq!(r.new_class_fraction, 0.0);
    }

    #[test]
    fn eddm_drift_alone_triggers() {
        let a: Vec<_> = (0..50).map(|i| rec(i, vec![i as f64], None)).collect();
        let r = evaluate_window(0, &a, &a, &DriftPolicy::default(), DriftLevel::Drift, 2).unwrap();
        assert!(r.triggered);
        let mut ks_only = DriftPolicy::default();
        ks_only.detectors.remove(&DetectorKind::Eddm);
        let r = evaluate_window(0, &a, &a, &ks_only, DriftLevel::Drift, 2).unwrap();
        assert!(!r.triggered);
    }

    #[test]
    fn new_class_fraction_counts_labeled_records_only() {
        let a: Vec<_> = (0..4).map(|i| rec(i, vec![0.0], Some(0))).collect();
        let b = vec![
            rec(10, vec![0.0], Some(2)),
            rec(11, vec![0.0], Some(3)),
            rec(12, vec![0.0], Some(1)),
            rec(13, vec![0.0], None),
        ];
        let r = evaluate_window(0, &a, &b, &DriftPolicy::default(), DriftLevel::Stable, 2).unwrap();
        assert!((r.new_class_fraction - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn error_signal_uses_confidence_proxy_when_unlabeled() {
        let mut r = rec(0, vec![0.0], Some(1));
        assert!(error_signal(&r));
        r.label = None;
        assert!(!error_signal(&r));
        r.confidence = 0.4;
        assert!(error_signal(&r));
    }
}
