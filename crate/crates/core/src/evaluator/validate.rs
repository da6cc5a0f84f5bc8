//! Deployment gate: holdout accuracy rules and a holdout A/B test.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::accuracy;
use super::EvalError;
use crate::config::ValidationPolicy;
use crate::data::{RecordId, RequestRecord};
use crate::learner::Model;

/// Arms smaller than this get a manual decision instead of a z-test verdict.
pub const MIN_ARM_SIZE: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
    PendingManual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZTest {
    pub z: f64,
    pub p_two_sided: f64,
    /// `P(Z <= z)`: small when the second arm is worse.
    pub p_lower: f64,
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Pooled two-proportion z-test of arm B against arm A.
pub fn two_proportion_z(successes_a: usize, n_a: usize, successes_b: usize, n_b: usize) -> ZTest {
    let (na, nb) = (n_a as f64, n_b as f64);
    let pa = successes_a as f64 / na;
    let pb = successes_b as f64 / nb;
    let pooled = (successes_a + successes_b) as f64 / (na + nb);
    let se = (pooled * (1.0 - pooled) * (1.0 / na + 1.0 / nb)).sqrt();
    let z = if se > 0.0 { (pb - pa) / se } else { 0.0 };
    ZTest { z, p_two_sided: (2.0 * normal_cdf(-z.abs())).min(1.0), p_lower: normal_cdf(z) }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbResult {
    pub z: f64,
    /// One-sided p-value for the candidate being worse.
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub correct_a: usize,
    pub correct_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleOutcome {
    pub rule: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationVerdict {
    pub decision: Decision,
    pub holdout_acc_new: f64,
    pub holdout_acc_old: f64,
    pub ab: Option<AbResult>,
    pub reasons: Vec<RuleOutcome>,
}

/// Splits the holdout by a seeded fair coin: `false` is arm A (incumbent).
pub fn assign_arms(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

/// Gates `candidate` against `incumbent` on a labeled holdout.
pub fn validate(
    candidate: &Model,
    incumbent: &Model,
    holdout: &[RequestRecord],
    training_ids: &[RecordId],
    policy: &ValidationPolicy,
    seed: u64,
) -> Result<ValidationVerdict, EvalError> {
    if holdout.is_empty() {
        return Err(EvalError::EmptyHoldout);
    }
    let train: HashSet<RecordId> = training_ids.iter().copied().collect();
    let overlap: Vec<RecordId> = holdout.iter().map(|r| r.record_id).filter(|id| train.contains(id)).collect();
    if !overlap.is_empty() {
        return Err(EvalError::OverlappingHoldout(overlap));
    }

    let acc_new = accuracy(candidate, holdout)?;
    let acc_old = accuracy(incumbent, holdout)?;
    let mut reasons = Vec::new();

    let r1 = acc_new >= policy.min_accuracy;
    reasons.push(RuleOutcome {
        rule: "min_accuracy".into(),
        passed: r1,
        detail: format!("candidate {acc_new:.4} vs minimum {:.4}", policy.min_accuracy),
    });
    let r2 = acc_new >= acc_old - policy.max_accuracy_drop;
    reasons.push(RuleOutcome {
        rule: "max_accuracy_drop".into(),
        passed: r2,
        detail: format!("candidate {acc_new:.4} vs incumbent {acc_old:.4} (allowed drop {:.4})", policy.max_accuracy_drop),
    });

    let arms = assign_arms(holdout.len(), seed);
    let (mut n_a, mut n_b, mut c_a, mut c_b) = (0, 0, 0, 0);
    for (r, &is_b) in holdout.iter().zip(&arms) {
        let label = r.label.ok_or(EvalError::Unlabeled)?;
        let model = if is_b { candidate } else { incumbent };
        let (pred, _) = model.predict(&r.features).map_err(|e| EvalError::Model(e.to_string()))?;
        let hit = usize::from(pred == label);
        if is_b {
            n_b += 1;
            c_b += hit;
        } else {
            n_a += 1;
            c_a += hit;
        }
    }

    let mut decision = if r1 && r2 { Decision::Accepted } else { Decision::Rejected };
    let ab = if n_a >= MIN_ARM_SIZE && n_b >= MIN_ARM_SIZE {
        let t = two_proportion_z(c_a, n_a, c_b, n_b);
        let worse = t.p_lower < policy.ab_significance;
        reasons.push(RuleOutcome {
            rule: "ab_test".into(),
            passed: !worse,
            detail: format!("z = {:.4}, p(candidate worse) = {:.4}", t.z, t.p_lower),
        });
        if worse {
            decision = Decision::Rejected;
        }
        Some(AbResult { z: t.z, p_value: t.p_lower, n_a, n_b, correct_a: c_a, correct_b: c_b })
    } else {
        reasons.push(RuleOutcome {
            rule: "ab_test".into(),
            passed: false,
            detail: format!("arms of {n_a} and {n_b} are below {MIN_ARM_SIZE}; manual decision required"),
        });
        if decision == Decision::Accepted {
            decision = Decision::PendingManual;
        }
        None
    };

    if decision == Decision::Accepted && policy.require_manual_approval {
        decision = Decision::PendingManual;
        reasons.push(RuleOutcome {
            rule: "manual_approval".into(),
            passed: false,
            detail: "manual approval required by policy".into(),
        });
    }

    Ok(ValidationVerdict { decision, holdout_acc_new: acc_new, holdout_acc_old: acc_old, ab, reasons })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSource;
    use crate::learner::Layout;

    fn holdout(n: usize) -> Vec<RequestRecord> {
        (0..n)
            .map(|i| {
                let x = if i % 4 == 0 { -1.0 } else { 1.0 };
                RequestRecord {
                    record_id: 1000 + i as u64,
                    arrival: i as u64,
                    features: vec![x],
                    prediction: 0,
                    confidence: 1.0,
                    label: Some(u32::from(x > 0.0)),
                    label_source: LabelSource::Online,
                }
            })
            .collect()
    }

    fn good_model() -> Model {
        let mut m = Model::zeros(Layout::new(1, 0, 2));
        m.params.values[1] = 3.0;
        m
    }

    #[test]
    fn z_test_reference_values() {
        let t = two_proportion_z(80, 100, 90, 100);
        assert!((t.z - 1.9803).abs() < 1e-3);
        assert!((t.p_two_sided - 0.0477).abs() < 5e-4);
        let swapped = two_proportion_z(90, 100, 80, 100);
        assert_eq!(swapped.z, -t.z);
    }

    #[test]
    fn identical_models_are_accepted() {
        let m = good_model();
        let v = validate(&m, &m, &holdout(200), &[], &ValidationPolicy::default(), 3).unwrap();
        assert_eq!(v.decision, Decision::Accepted);
        assert_eq!(v.ab.as_ref().unwrap().z, 0.0);
        assert_eq!(v.holdout_acc_new, v.holdout_acc_old);
    }

    #[test]
    fn worse_candidate_is_rejected() {
        let cand = Model::zeros(Layout::new(1, 0, 2)); // always predicts 0
        let v = validate(&cand, &good_model(), &holdout(200), &[], &ValidationPolicy::default(), 3).unwrap();
        assert_eq!(v.decision, Decision::Rejected);
        assert!(v.reasons.iter().any(|r| r.rule == "max_accuracy_drop" && !r.passed));
    }

    #[test]
    fn small_arms_need_a_human() {
        let m = good_model();
        let v = validate(&m, &m, &holdout(20), &[], &ValidationPolicy::default(), 3).unwrap();
        assert_eq!(v.decision, Decision::PendingManual);
        assert!(v.ab.is_none());
    }

    #[test]
    fn manual_policy_defers() {
        let m = good_model();
        let policy = ValidationPolicy { require_manual_approval: true, ..ValidationPolicy::default() };
        let v = validate(&m, &m, &holdout(200), &[], &policy, 3).unwrap();
        assert_eq!(v.decision, Decision::PendingManual);
    }

    #[test]
    fn holdout_errors() {
        let m = good_model();
        let h = holdout(50);
        let err = validate(&m, &m, &h, &[1, 1003], &ValidationPolicy::default(), 0).unwrap_err();
        assert_eq!(err, EvalError::OverlappingHoldout(vec![1003]));
        assert_eq!(validate(&m, &m, &[], &[], &ValidationPolicy::default(), 0).unwrap_err(), EvalError::EmptyHoldout);
    }

    #[test]
    fn verdict_is_deterministic_given_seed() {
        let m = good_model();
        let cand = Model::zeros(Layout::new(1, 0, 2));
        let a = validate(&cand, &m, &holdout(120), &[], &ValidationPolicy::default(), 17).unwrap();
        let b = validate(&cand, &m, &holdout(120), &[], &ValidationPolicy::default(), 17).unwrap();
        assert_eq!(a, b);
    }
}
