use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{BufRead, Write};

use super::{ClassId, DataError, LabelSource, RecordId, RequestRecord};

/// A request as seen by the collector, before it is assigned an id.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedRequest {
    pub arrival: u64,
    pub features: Vec<f64>,
    pub prediction: ClassId,
    pub confidence: f64,
    pub label: Option<ClassId>,
    pub label_source: LabelSource,
}

/// Bounded FIFO of recent requests plus an archive of evicted labeled ones.
///
/// Unlabeled records evicted from the ring are dropped. Labeled records are
/// never lost: they move to the archive, which is append-only.
#[derive(Debug, Clone)]
pub struct ClCache {
    capacity: usize,
    dim: usize,
    buffer: VecDeque<RequestRecord>,
    archive: Vec<RequestRecord>,
    class_index: BTreeMap<ClassId, BTreeSet<RecordId>>,
    next_id: RecordId,
    last_arrival: u64,
    labeled_collected: usize,
}

impl ClCache {
    pub fn new(capacity: usize, dim: usize) -> Self {
        assert!(capacity >= 1, "cache capacity must be >= 1");
        Self {
            capacity,
            dim,
            buffer: VecDeque::with_capacity(capacity.min(1 << 16)),
            archive: Vec::new(),
            class_index: BTreeMap::new(),
            next_id: 1,
            last_arrival: 0,
            labeled_collected: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn buffer(&self) -> impl DoubleEndedIterator<Item = &RequestRecord> + ExactSizeIterator {
        self.buffer.iter()
    }

    pub fn archive(&self) -> &[RequestRecord] {
        &self.archive
    }

    /// Labeled records ever collected or labeled afterwards.
    pub fn labeled_collected(&self) -> usize {
        self.labeled_collected
    }

    pub fn class_index(&self) -> &BTreeMap<ClassId, BTreeSet<RecordId>> {
        &self.class_index
    }

    /// Stores a request and returns its id, evicting the oldest if full.
    pub fn collect(&mut self, req: ObservedRequest) -> Result<RecordId, DataError> {
        if req.features.len() != self.dim {
            return Err(DataError::DimensionMismatch { expected: self.dim, got: req.features.len() });
        }
        if !(0.0..=1.0).contains(&req.confidence) {
            return Err(DataError::InvalidRecord(format!("confidence {} is outside [0, 1]", req.confidence)));
        }
        if req.features.iter().any(|x| !x.is_finite()) {
            return Err(DataError::InvalidRecord("non-finite feature".into()));
        }
        if req.arrival < self.last_arrival {
            return Err(DataError::InvalidRecord(format!(
                "arrival {} precedes previous arrival {}",
                req.arrival, self.last_arrival
            )));
        }
        let id = self.next_id;
        self.next_id += 1;
        self.last_arrival = req.arrival;
        let label_source = if req.label.is_some() { req.label_source } else { LabelSource::None };
        if let Some(label) = req.label {
            self.class_index.entry(label).or_default().insert(id);
            self.labeled_collected += 1;
        }
        if self.buffer.len() == self.capacity {
            let evicted = self.buffer.pop_front().expect("capacity >= 1");
            if evicted.label.is_some() {
                self.archive.push(evicted);
            }
        }
        self.buffer.push_back(RequestRecord {
            record_id: id,
            arrival: req.arrival,
            features: req.features,
            prediction: req.prediction,
            confidence: req.confidence,
            label: req.label,
            label_source,
        });
        Ok(id)
    }

    /// Copies the most recent `min(n, len)` records in arrival order.
    pub fn snapshot_window(&self, n: usize) -> Result<Vec<RequestRecord>, DataError> {
        if self.buffer.is_empty() {
            return Err(DataError::EmptyCache);
        }
        let skip = self.buffer.len().saturating_sub(n);
        Ok(self.buffer.iter().skip(skip).cloned().collect())
    }

    pub fn get(&self, id: RecordId) -> Option<&RequestRecord> {
        if let Ok(i) = self.archive.binary_search_by_key(&id, |r| r.record_id) {
            return Some(&self.archive[i]);
        }
        self.buffer.binary_search_by_key(&id, |r| r.record_id).ok().map(|i| &self.buffer[i])
    }

    /// Attaches a label to a buffered record. Labels are write-once.
    pub(crate) fn attach_label(&mut self, id: RecordId, label: ClassId, source: LabelSource) -> Result<(), DataError> {
        let i = self.buffer.binary_search_by_key(&id, |r| r.record_id).map_err(|_| {
            if self.archive.binary_search_by_key(&id, |r| r.record_id).is_ok() {
                DataError::AlreadyLabeled(id)
            } else {
                DataError::UnknownRecord(id)
            }
        })?;
        let rec = &mut self.buffer[i];
        if rec.label.is_some() {
            return Err(DataError::AlreadyLabeled(id));
        }
        rec.label = Some(label);
        rec.label_source = source;
        self.class_index.entry(label).or_default().insert(id);
        self.labeled_collected += 1;
        Ok(())
    }

    /// All labeled records in the archive and the ring, in id order.
    pub fn labeled(&self) -> impl Iterator<Item = &RequestRecord> {
        self.archive.iter().chain(self.buffer.iter().filter(|r| r.label.is_some()))
    }

    pub fn labeled_in_buffer(&self) -> usize {
        self.buffer.iter().filter(|r| r.label.is_some()).count()
    }

    /// Writes the archive as JSON lines.
    pub fn export_archive<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for r in &self.archive {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads a JSON-lines archive.
    pub fn read_archive<R: BufRead>(r: R) -> std::io::Result<Vec<RequestRecord>> {
        r.lines()
            .filter(|l| l.as_ref().map(|l| !l.trim().is_empty()).unwrap_or(true))
            .map(|l| serde_json::from_str(&l?).map_err(std::io::Error::other))
            .collect()
    }
}
