//! Seeded synthetic data: Gaussian class clusters, drifting request streams,
//! and the stream CSV format.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ClassId;
use crate::learner::{Example, Sample};

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error("bad stream header: {0}")]
    Header(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An isotropic Gaussian cluster for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianClass {
    pub label: ClassId,
    pub mean: Vec<f64>,
    pub std: f64,
}

impl GaussianClass {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let noise = Normal::new(0.0, self.std).expect("std is finite and >= 0");
        self.mean.iter().map(|m| m + noise.sample(rng)).collect()
    }
}

/// `n_per_class` draws from every class, shuffled.
pub fn sample_classes<R: Rng>(classes: &[GaussianClass], n_per_class: usize, rng: &mut R) -> Vec<Example> {
    let mut out: Vec<Example> = classes
        .iter()
        .flat_map(|c| (0..n_per_class).map(move |_| c))
        .map(|c| Example { features: c.sample(rng), label: c.label })
        .collect();
    out.shuffle(rng);
    out
}

/// Class clusters centred at `±separation` along axis `axis`.
pub fn axis_pair(dim: usize, axis: usize, separation: f64, std: f64, labels: [ClassId; 2]) -> [GaussianClass; 2] {
    let mean = |sign: f64| {
        let mut m = vec![0.0; dim];
        m[axis] = sign * separation;
        m
    };
    [
        GaussianClass { label: labels[0], mean: mean(1.0), std },
        GaussianClass { label: labels[1], mean: mean(-1.0), std },
    ]
}

/// One labeled row of a request stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRow {
    pub features: Vec<f64>,
    pub label: Option<ClassId>,
}

impl Sample for StreamRow {
    fn features(&self) -> &[f64] {
        &self.features
    }

    fn label(&self) -> Option<ClassId> {
        self.label
    }
}

/// A stream that starts on `before` and switches at `shift_at`.
///
/// After the switch each row comes from `after_new` with probability
/// `new_class_share`, otherwise from `after_old`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftStream {
    pub len: usize,
    pub shift_at: usize,
    pub before: Vec<GaussianClass>,
    pub after_old: Vec<GaussianClass>,
    pub after_new: Vec<GaussianClass>,
    pub new_class_share: f64,
}

impl ShiftStream {
    /// Two classes on axis 0; at `shift_at` two new classes appear on axis 1
    /// and the old ones move by `offset` along axis 2.
    pub fn new_classes(dim: usize, len: usize, shift_at: usize) -> Self {
        assert!(dim >= 3, "the default stream needs at least three features");
        let before = axis_pair(dim, 0, 2.0, 1.0, [0, 1]).to_vec();
        let after_old = before
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.mean[2] += 1.5;
                c
            })
            .collect();
        Self {
            len,
            shift_at,
            before,
            after_old,
            after_new: axis_pair(dim, 1, 2.0, 1.0, [2, 3]).to_vec(),
            new_class_share: 0.75,
        }
    }

    /// The same classes throughout.
    pub fn stationary(dim: usize, len: usize) -> Self {
        let before = axis_pair(dim, 0, 2.0, 1.0, [0, 1]).to_vec();
        Self { len, shift_at: len, after_old: before.clone(), before, after_new: Vec::new(), new_class_share: 0.0 }
    }

    pub fn generate(&self, seed: u64) -> Vec<StreamRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.len)
            .map(|i| {
                let pool = if i < self.shift_at {
                    &self.before
                } else if !self.after_new.is_empty() && rng.random_bool(self.new_class_share) {
                    &self.after_new
                } else {
                    &self.after_old
                };
                let class = &pool[rng.random_range(0..pool.len())];
                StreamRow { features: class.sample(&mut rng), label: Some(class.label) }
            })
            .collect()
    }
}

fn header(dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("feature_{i}")).chain(std::iter::once("label".to_string())).collect()
}

/// Writes `feature_0..feature_{d-1},label`; unlabeled rows leave `label` empty.
pub fn write_stream_csv<W: Write>(w: W, rows: &[StreamRow]) -> Result<(), StreamError> {
    let dim = rows.first().map_or(0, |r| r.features.len());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header(dim))?;
    for r in rows {
        let mut rec: Vec<String> = r.features.iter().map(|x| x.to_string()).collect();
        rec.push(r.label.map(|l| l.to_string()).unwrap_or_default());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a stream CSV; the header must name exactly `dim` features.
pub fn read_stream_csv<R: Read>(r: R, dim: usize) -> Result<Vec<StreamRow>, StreamError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let got: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let want = header(dim);
    if got != want {
        return Err(StreamError::Header(format!("expected `{}`, got `{}`", want.join(","), got.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |message: String| StreamError::Row { row, message };
        let features = (0..dim)
            .map(|j| rec[j].parse::<f64>().map_err(|e| bad(format!("feature_{j}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let label = match &rec[dim] {
            "" => None,
            s => Some(s.parse::<ClassId>().map_err(|e| bad(format!("label: {e}")))?),
        };
        rows.push(StreamRow { features, label });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let s = ShiftStream::new_classes(5, 300, 100);
        assert_eq!(s.generate(3), s.generate(3));
        assert_ne!(s.generate(3), s.generate(4));
    }

    #[test]
    fn new_classes_only_after_shift() {
        let rows = ShiftStream::new_classes(5, 2000, 1000).generate(1);
        assert!(rows[..1000].iter().all(|r| r.label.unwrap() < 2));
        let late = rows[1000..].iter().filter(|r| r.label.unwrap() >= 2).count() as f64 / 1000.0;
        assert!((late - 0.75).abs() < 0.05, "{late}");
    }

    #[test]
    fn csv_round_trip() {
        let mut rows = ShiftStream::stationary(3, 20).generate(7);
        rows[4].label = None;
        let mut buf = Vec::new();
        write_stream_csv(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"feature_0,feature_1,feature_2,label\n"));
        assert_eq!(read_stream_csv(buf.as_slice(), 3).unwrap(), rows);
    }

    #[test]
    fn csv_rejects_wrong_header_and_values() {
        assert!(matches!(read_stream_csv("feature_0,label\n1,0\n".as_bytes(), 2), Err(StreamError::Header(_))));
        let err = read_stream_csv("feature_0,label\nx,0\n".as_bytes(), 1).unwrap_err();
        assert!(matches!(err, StreamError::Row { row: 2, .. }));
    }
}
