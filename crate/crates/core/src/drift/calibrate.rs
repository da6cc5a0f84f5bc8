//! Monte-Carlo trigger rates of the KS rule on synthetic Gaussian windows.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{evaluate_window_with, DriftError, DriftLevel};
use crate::config::DriftPolicy;
use crate::data::{LabelSource, RequestRecord};
use crate::par::{self, Exec};

/// `n` unlabeled records with standard normal features, feature 0 shifted by
/// `shift` standard deviations.
pub fn gaussian_window(rng: &mut impl Rng, n: usize, dim: usize, shift: f64) -> Vec<RequestRecord> {
    (0..n)
        .map(|i| RequestRecord {
            record_id: i as u64 + 1,
            arrival: i as u64,
            features: (0..dim)
                .map(|j| {
                    let x: f64 = StandardNormal.sample(rng);
                    if j == 0 { x + shift } else { x }
                })
                .collect(),
            prediction: 0,
            confidence: rng.random_range(0.5..1.0),
            label: None,
            label_source: LabelSource::None,
        })
        .collect()
}

/// Fraction of `reps` independent reference/current window pairs that
/// trigger. Repetition `i` draws from its own stream, so the result does not
/// depend on `exec`.
pub fn trigger_rate(
    exec: Exec,
    policy: &DriftPolicy,
    reps: usize,
    window: usize,
    dim: usize,
    shift: f64,
    seed: u64,
) -> Result<f64, DriftError> {
    let fired = par::map_range_with(exec, reps, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let reference = gaussian_window(&mut rng, window, dim, 0.0);
        let current = gaussian_window(&mut rng, window, dim, shift);
        // each repetition is already one task, so the marginals run inline
        evaluate_window_with(Exec::Sequential, i as u64, &reference, &current, policy, DriftLevel::Stable, 1)
            .map(|r| r.triggered)
    });
    let mut hits = 0usize;
    for f in fired {
        hits += f? as usize;
    }
    Ok(hits as f64 / reps.max(1) as f64)
}
