use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ClCache, ClassId, DataError, RecordId, RequestRecord};

/// Reproducible description of how a training set was selected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    /// Half-open arrival range `[t0, t1)` of the new data.
    pub time_range: Option<(u64, u64)>,
    pub classes: BTreeSet<ClassId>,
    /// Explicitly sampled (rehearsal) record ids.
    pub sampled_ids: Vec<RecordId>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub new: usize,
    pub rehearsal: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub manifest_id: String,
    pub selection: Selection,
    /// The training set in order: new records first, then rehearsal.
    pub record_ids: Vec<RecordId>,
    pub counts: ManifestCounts,
    /// Rehearsal records requested but not available.
    pub shortfall: usize,
    pub content_digest: String,
}

impl DataManifest {
    pub fn new(selection: Selection, record_ids: Vec<RecordId>, counts: ManifestCounts, shortfall: usize) -> Self {
        let content_digest = content_digest(&record_ids);
        Self {
            manifest_id: format!("m-{}", &content_digest[..12]),
            selection,
            record_ids,
            counts,
            shortfall,
            content_digest,
        }
    }

    pub fn empty(seed: u64) -> Self {
        Self::new(
            Selection { time_range: None, classes: BTreeSet::new(), sampled_ids: Vec::new(), seed },
            Vec::new(),
            ManifestCounts { new: 0, rehearsal: 0 },
            0,
        )
    }
}

/// SHA-256 over the little-endian encoding of the ordered ids.
pub fn content_digest(ids: &[RecordId]) -> String {
    let mut h = Sha256::new();
    for id in ids {
        h.update(id.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Mixes `new_records` with a class-stratified sample of historical labeled
/// records.
///
/// The historical pool is every labeled record in the cache (archive and ring)
/// that is not itself one of `new_records`. The sample size is
/// `round(ratio * |new| / (1 - ratio))`, capped at the pool size; `ratio = 1`
/// takes the whole pool.
pub fn sample_rehearsal(
    cache: &ClCache,
    new_records: &[RequestRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<RequestRecord>, DataManifest), DataError> {
    sample_rehearsal_excluding(cache, new_records, &HashSet::new(), ratio, seed)
}

/// [`sample_rehearsal`] with `exclude` also kept out of the pool, e.g.
/// records reserved for validation.
pub fn sample_rehearsal_excluding(
    cache: &ClCache,
    new_records: &[RequestRecord],
    exclude: &HashSet<RecordId>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<RequestRecord>, DataManifest), DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::InvalidRatio(ratio));
    }
    if let Some(r) = new_records.iter().find(|r| r.label.is_none()) {
        return Err(DataError::UnlabeledNewData(r.record_id));
    }
    let new_ids: HashSet<RecordId> = new_records.iter().map(|r| r.record_id).collect();

    let mut pool: BTreeMap<ClassId, Vec<&RequestRecord>> = BTreeMap::new();
    for r in cache.labeled().filter(|r| !new_ids.contains(&r.record_id) && !exclude.contains(&r.record_id)) {
        pool.entry(r.label.expect("labeled")).or_default().push(r);
    }
    let pool_size: usize = pool.values().map(Vec::len).sum();
    let wanted = if ratio == 0.0 {
        0
    } else if ratio == 1.0 {
        pool_size
    } else {
        (ratio * new_records.len() as f64 / (1.0 - ratio)).round() as usize
    };
    let take = wanted.min(pool_size);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sampled: Vec<&RequestRecord> = Vec::with_capacity(take);
    for (class, quota) in stratify(&pool, take) {
        let members = &pool[&class];
        let picks = rand::seq::index::sample(&mut rng, members.len(), quota);
        sampled.extend(picks.into_iter().map(|i| members[i]));
    }
    sampled.sort_by_key(|r| r.record_id);

    let mut training: Vec<RequestRecord> = new_records.to_vec();
    training.extend(sampled.iter().map(|r| (*r).clone()));

    let time_range = new_records
        .iter()
        .map(|r| r.arrival)
        .min()
        .zip(new_records.iter().map(|r| r.arrival).max())
        .map(|(lo, hi)| (lo, hi + 1));
    let selection = Selection {
        time_range,
        classes: training.iter().filter_map(|r| r.label).collect(),
        sampled_ids: sampled.iter().map(|r| r.record_id).collect(),
        seed,
    };
    let manifest = DataManifest::new(
        selection,
        training.iter().map(|r| r.record_id).collect(),
        ManifestCounts { new: new_records.len(), rehearsal: sampled.len() },
        wanted - take,
    );
    Ok((training, manifest))
}

/// Splits `total` across classes proportionally to their pool sizes using
/// largest remainders; ties go to the smaller class id.
fn stratify(pool: &BTreeMap<ClassId, Vec<&RequestRecord>>, total: usize) -> Vec<(ClassId, usize)> {
    let size: usize = pool.values().map(Vec::len).sum();
    if size == 0 || total == 0 {
        return Vec::new();
    }
    let mut quotas: Vec<(ClassId, usize, u128)> = pool
        .iter()
        .map(|(&c, v)| {
            let exact = total as u128 * v.len() as u128;
            (c, (exact / size as u128) as usize, exact % size as u128)
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| quotas[b].2.cmp(&quotas[a].2).then(quotas[a].0.cmp(&quotas[b].0)));
    for &i in order.iter().take(total - assigned) {
        quotas[i].1 += 1;
    }
    quotas.into_iter().filter(|q| q.1 > 0).map(|(c, q, _)| (c, q)).collect()
}

/// Re-materializes a training set from the stores.
pub fn materialize(manifest: &DataManifest, cache: &ClCache) -> Result<Vec<RequestRecord>, DataError> {
    let mut out = Vec::with_capacity(manifest.record_ids.len());
    let mut missing = Vec::new();
    for &id in &manifest.record_ids {
        match cache.get(id) {
            Some(r) => out.push(r.clone()),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(DataError::MissingRecords(missing));
    }
    let ids: Vec<RecordId> = out.iter().map(|r| r.record_id).collect();
    if content_digest(&ids) != manifest.content_digest {
        return Err(DataError::DigestMismatch);
    }
    Ok(out)
}

/// Renders the selection as SQL over
/// `records(record_id, arrival, features..., prediction, confidence, label)`.
pub fn render_query(manifest: &DataManifest) -> String {
    let sel = &manifest.selection;
    let mut slice = Vec::new();
    if let Some((t0, t1)) = sel.time_range {
        slice.push(format!("arrival >= {t0} AND arrival < {t1}"));
    }
    if !sel.classes.is_empty() {
        slice.push(format!("label IN ({})", join(sel.classes.iter())));
    }
    let ids = (!sel.sampled_ids.is_empty()).then(|| format!("record_id IN ({})", join(sel.sampled_ids.iter())));

    let mut sql = String::from("SELECT * FROM records WHERE ");
    match (slice.is_empty(), ids) {
        (true, None) => sql.push_str("1 = 0"),
        (true, Some(ids)) => sql.push_str(&ids),
        (false, None) => sql.push_str(&slice.join(" AND ")),
        (false, Some(ids)) => {
            let _ = write!(sql, "({}) OR {ids}", slice.join(" AND "));
        }
    }
    sql.push_str(" ORDER BY record_id;");
    sql
}

fn join<T: std::fmt::Display>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSource, ObservedRequest};

    fn cache(history: &[(u64, ClassId)], capacity: usize) -> ClCache {
        let mut c = ClCache::new(capacity, 1);
        for &(t, label) in history {
            c.collect(ObservedRequest {
                arrival: t,
                features: vec![t as f64],
                prediction: label,
                confidence: 0.9,
                label: Some(label),
                label_source: LabelSource::Online,
            })
            .unwrap();
        }
        c
    }

    fn history(n: u64) -> Vec<(u64, ClassId)> {
        (0..n).map(|t| (t, (t % 3) as ClassId)).collect()
    }

    #[test]
    fn zero_ratio_yields_new_records_only() {
        let c = cache(&history(40), 30);
        let new = c.snapshot_window(10).unwrap();
        let (set, m) = sample_rehearsal(&c, &new, 0.0, 7).unwrap();
        assert_eq!(set, new);
        assert_eq!(m.counts, ManifestCounts { new: 10, rehearsal: 0 });
    }

    #[test]
    fn half_ratio_doubles_the_set() {
        let c = cache(&history(40), 30);
        let new = c.snapshot_window(10).unwrap();
        let (set, m) = sample_rehearsal(&c, &new, 0.5, 7).unwrap();
        assert_eq!(set.len(), 20);
        assert_eq!(m.counts.rehearsal, 10);
        assert_eq!(m.shortfall, 0);
        let new_ids: HashSet<_> = new.iter().map(|r| r.record_id).collect();
        assert!(set[10..].iter().all(|r| !new_ids.contains(&r.record_id)));
    }

    #[test]
    fn stratified_quotas_follow_class_shares() {
        let mut h: Vec<(u64, ClassId)> = (0..90).map(|t| (t, 0)).collect();
        h.extend((90..120).map(|t| (t, 1)));
        let c = cache(&h, 200);
        let new: Vec<RequestRecord> = Vec::new();
        let (set, _) = sample_rehearsal(&c, &new, 1.0, 1).unwrap();
        assert_eq!(set.len(), 120);
        let mut pool = BTreeMap::new();
        for r in c.labeled() {
            pool.entry(r.label.unwrap()).or_insert_with(Vec::new).push(r);
        }
        assert_eq!(stratify(&pool, 8), vec![(0, 6), (1, 2)]);
        assert_eq!(stratify(&pool, 2), vec![(0, 2)]);
    }

    #[test]
    fn shortfall_is_recorded() {
        let c = cache(&history(12), 100);
        let new = c.snapshot_window(8).unwrap();
        let (_, m) = sample_rehearsal(&c, &new, 0.8, 3).unwrap();
        assert_eq!(m.counts.rehearsal, 4);
        assert_eq!(m.shortfall, 32 - 4);
    }

    #[test]
    fn same_seed_same_digest() {
        let c = cache(&history(300), 100);
        let new = c.snapshot_window(20).unwrap();
        let a = sample_rehearsal(&c, &new, 0.5, 11).unwrap().1;
        let b = sample_rehearsal(&c, &new, 0.5, 11).unwrap().1;
        assert_eq!(a.content_digest, b.content_digest);
        let other = sample_rehearsal(&c, &new, 0.5, 12).unwrap().1;
        assert_ne!(a.content_digest, other.content_digest);
    }

    #[test]
    fn unlabeled_new_data_is_rejected() {
        let c = cache(&history(5), 10);
        let mut new = c.snapshot_window(2).unwrap();
        new[1].label = None;
        assert_eq!(sample_rehearsal(&c, &new, 0.5, 0).unwrap_err(), DataError::UnlabeledNewData(new[1].record_id));
        assert_eq!(sample_rehearsal(&c, &[], 1.5, 0).unwrap_err(), DataError::InvalidRatio(1.5));
    }

    #[test]
    fn materialize_round_trip_and_missing_ids() {
        let c = cache(&history(60), 50);
        let new = c.snapshot_window(10).unwrap();
        let (set, m) = sample_rehearsal(&c, &new, 0.5, 5).unwrap();
        assert_eq!(materialize(&m, &c).unwrap(), set);

        let mut purged = m.clone();
        purged.record_ids.push(10_000);
        assert_eq!(materialize(&purged, &c), Err(DataError::MissingRecords(vec![10_000])));

        let empty = DataManifest::empty(0);
        assert_eq!(materialize(&empty, &c).unwrap(), Vec::new());
        assert_eq!(empty.content_digest, content_digest(&[]));
    }

    #[test]
    fn query_rendering() {
        let m = DataManifest::new(
            Selection { time_range: Some((100, 200)), classes: [0, 1].into(), sampled_ids: vec![], seed: 0 },
            vec![],
            ManifestCounts { new: 0, rehearsal: 0 },
            0,
        );
        assert_eq!(
            render_query(&m),
            "SELECT * FROM records WHERE arrival >= 100 AND arrival < 200 AND label IN (0,1) ORDER BY record_id;"
        );
        assert_eq!(render_query(&m), render_query(&m.clone()));

        let mut no_classes = m.clone();
        no_classes.selection.classes.clear();
        assert!(!render_query(&no_classes).contains("label IN"));

        let mut with_ids = m.clone();
        with_ids.selection.sampled_ids = vec![4, 9];
        assert_eq!(
            render_query(&with_ids),
            "SELECT * FROM records WHERE (arrival >= 100 AND arrival < 200 AND label IN (0,1)) OR record_id IN (4,9) ORDER BY record_id;"
        );
        assert_eq!(render_query(&DataManifest::empty(0)), "SELECT * FROM records WHERE 1 = 0 ORDER BY record_id;");
    }
}
