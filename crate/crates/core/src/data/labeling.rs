use std::collections::BTreeSet;

use super::{ClCache, ClassId, DataError, LabelSource, RecordId};

/// Records awaiting a human label.
#[derive(Debug, Clone, Default)]
pub struct LabelQueue {
    pending: BTreeSet<RecordId>,
}

impl LabelQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pending(&self) -> impl Iterator<Item = RecordId> + '_ {
        self.pending.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn contains(&self, id: RecordId) -> bool {
        self.pending.contains(&id)
    }

    pub fn enqueue(&mut self, cache: &ClCache, id: RecordId) -> Result<(), DataError> {
        let rec = cache.get(id).ok_or(DataError::UnknownRecord(id))?;
        if rec.label.is_some() {
            return Err(DataError::AlreadyLabeled(id));
        }
        self.pending.insert(id);
        Ok(())
    }

    pub fn provide_label(&mut self, cache: &mut ClCache, id: RecordId, label: ClassId) -> Result<(), DataError> {
        match cache.get(id) {
            None => return Err(DataError::UnknownRecord(id)),
            Some(r) if r.label.is_some() => return Err(DataError::AlreadyLabeled(id)),
            Some(_) => {}
        }
        if !self.pending.contains(&id) {
            return Err(DataError::NotEnqueued(id));
        }
        cache.attach_label(id, label, LabelSource::Annotator)?;
        self.pending.remove(&id);
        Ok(())
    }

    /// Drops queued ids whose records were evicted unlabeled.
    pub fn prune(&mut self, cache: &ClCache) {
        self.pending.retain(|&id| cache.get(id).is_some());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ObservedRequest;

    fn cache_with_one() -> (ClCache, RecordId) {
        let mut c = ClCache::new(8, 1);
        let id = c
            .collect(ObservedRequest {
                arrival: 0,
                features: vec![0.0],
                prediction: 0,
                confidence: 0.4,
                label: None,
                label_source: LabelSource::None,
            })
            .unwrap();
        (c, id)
    }

    #[test]
    fn enqueue_then_provide() {
        let (mut c, id) = cache_with_one();
        let mut q = LabelQueue::new();
        q.enqueue(&c, id).unwrap();
        q.provide_label(&mut c, id, 3).unwrap();
        let r = c.get(id).unwrap();
        assert_eq!(r.label, Some(3));
        assert_eq!(r.label_source, LabelSource::Annotator);
        assert!(q.is_empty());
        assert_eq!(c.labeled_collected(), 1);
    }

    #[test]
    fn provide_without_enqueue() {
        let (mut c, id) = cache_with_one();
        let mut q = LabelQueue::new();
        assert_eq!(q.provide_label(&mut c, id, 1), Err(DataError::NotEnqueued(id)));
        assert_eq!(q.provide_label(&mut c, 99, 1), Err(DataError::UnknownRecord(99)));
    }

    #[test]
    fn labels_are_write_once() {
        let (mut c, id) = cache_with_one();
        let mut q = LabelQueue::new();
        q.enqueue(&c, id).unwrap();
        q.provide_label(&mut c, id, 1).unwrap();
        assert_eq!(q.provide_label(&mut c, id, 2), Err(DataError::AlreadyLabeled(id)));
        assert_eq!(c.get(id).unwrap().label, Some(1));
    }
}
