use std::collections::HashSet;

use driftctl_core::data::{materialize, sample_rehearsal, sample_rehearsal_excluding, ClCache, LabelSource, ObservedRequest, RequestRecord};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A cache of `n` records, roughly `labeled` of them with labels, plus the
/// last `fresh` labeled ones as new data.
fn store(seed: u64, capacity: usize, n: usize, labeled: f64, fresh: usize) -> (ClCache, Vec<RequestRecord>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cache = ClCache::new(capacity, 2);
    for t in 0..n as u64 {
        let label = rng.random_bool(labeled).then(|| rng.random_range(0..4));
        cache
            .collect(ObservedRequest {
                arrival: t,
                features: vec![rng.random(), rng.random()],
                prediction: 0,
                confidence: rng.random(),
                label,
                label_source: if label.is_some() { LabelSource::Annotator } else { LabelSource::None },
            })
            .unwrap();
    }
    let buffered: Vec<RequestRecord> = cache.buffer().filter(|r| r.label.is_some()).cloned().collect();
    let new = buffered[buffered.len().saturating_sub(fresh)..].to_vec();
    (cache, new)
}

proptest! {
    #[test]
    fn materialized_manifest_reproduces_the_training_set(
        seed in 0u64..10_000, capacity in 10usize..200, n in 20usize..600, labeled in 0.1f64..1.0,
        fresh in 1usize..30, ratio in 0.0f64..=1.0,
    ) {
        let (cache, new) = store(seed, capacity, n, labeled, fresh);
        prop_assume!(!new.is_empty());
        let (training, manifest) = sample_rehearsal(&cache, &new, ratio, seed).unwrap();
        prop_assert_eq!(&materialize(&manifest, &cache).unwrap(), &training);
        prop_assert_eq!(manifest.counts.new + manifest.counts.rehearsal, training.len());
        prop_assert_eq!(&training[..new.len()], &new[..]);

        // same inputs, same manifest
        let (_, again) = sample_rehearsal(&cache, &new, ratio, seed).unwrap();
        prop_assert_eq!(&again, &manifest);

        // rehearsal never duplicates new data or excluded records
        let exclude: HashSet<u64> = training.iter().skip(new.len()).take(3).map(|r| r.record_id).collect();
        let (t2, _) = sample_rehearsal_excluding(&cache, &new, &exclude, ratio, seed).unwrap();
        let ids: HashSet<u64> = t2.iter().map(|r| r.record_id).collect();
        prop_assert_eq!(ids.len(), t2.len());
        prop_assert!(exclude.iter().all(|id| !ids.contains(id)));
    }
}

#[test]
fn tampered_manifest_is_detected() {
    let (cache, new) = store(1, 100, 300, 0.8, 10);
    let (_, mut manifest) = sample_rehearsal(&cache, &new, 0.5, 1).unwrap();
    manifest.record_ids.swap(0, 1);
    assert!(materialize(&manifest, &cache).is_err());
}
