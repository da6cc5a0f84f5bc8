//! Early drift detection from the spacing between classification errors.
//!
//! The detector tracks the running mean `p` and standard deviation `s` of the
//! distance (in requests) between consecutive errors. While the model is
//! stable the distances grow or hold steady and `p + 2s` keeps setting new
//! peaks; a drop of the ratio `(p + 2s) / peak` below the warning and drift
//! levels signals that errors are bunching up.

use serde::{Deserialize, Serialize};

use super::DriftError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftLevel {
    Stable,
    Warning,
    Drift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EddmState {
    pub error_count: usize,
    pub last_error_index: Option<u64>,
    pub last_index: Option<u64>,
    /// Running mean of error distances.
    pub mean_distance: f64,
    /// Welford sum of squared deviations of error distances.
    pub m2: f64,
    pub peak: f64,
    pub level: DriftLevel,
    pub warmup_min_errors: usize,
    pub warning_ratio: f64,
    pub drift_ratio: f64,
}

impl EddmState {
    pub fn new(warmup_min_errors: usize, warning_ratio: f64, drift_ratio: f64) -> Self {
        Self {
            error_count: 0,
            last_error_index: None,
            last_index: None,
            mean_distance: 0.0,
            m2: 0.0,
            peak: 0.0,
            level: DriftLevel::Stable,
            warmup_min_errors,
            warning_ratio,
            drift_ratio,
        }
    }

    fn distances(&self) -> usize {
        self.error_count.saturating_sub(1)
    }

    pub fn std_distance(&self) -> f64 {
        let k = self.distances();
        if k == 0 { 0.0 } else { (self.m2 / k as f64).sqrt() }
    }

    /// `p + 2s` for the current statistics.
    pub fn spread(&self) -> f64 {
        self.mean_distance + 2.0 * self.std_distance()
    }

    fn reset(&mut self) {
        self.error_count = 0;
        self.last_error_index = None;
        self.mean_distance = 0.0;
        self.m2 = 0.0;
        self.peak = 0.0;
        self.level = DriftLevel::Stable;
    }

    /// Feeds one prediction outcome at stream position `index`.
    ///
    /// On `Drift` the statistics are cleared after the level is reported.
    pub fn update(&mut self, is_error: bool, index: u64) -> Result<DriftLevel, DriftError> {
        if let Some(last) = self.last_index {
            if index <= last {
                return Err(DriftError::NonMonotoneIndex { last, got: index });
            }
        }
        self.last_index = Some(index);
        if !is_error {
            return Ok(self.level);
        }

        self.error_count += 1;
        if let Some(prev) = self.last_error_index {
            let distance = (index - prev) as f64;
            let k = self.distances() as f64;
            let delta = distance - self.mean_distance;
            self.mean_distance += delta / k;
            self.m2 += delta * (distance - self.mean_distance);
        }
        self.last_error_index = Some(index);

        if self.error_count < self.warmup_min_errors {
            self.level = DriftLevel::Stable;
            return Ok(self.level);
        }
        let spread = self.spread();
        if spread > self.peak {
            self.peak = spread;
            self.level = DriftLevel::Stable;
            return Ok(self.level);
        }
        let ratio = spread / self.peak;
        self.level = if ratio < self.drift_ratio {
            DriftLevel::Drift
        } else if ratio < self.warning_ratio {
            DriftLevel::Warning
        } else {
            DriftLevel::Stable
        };
        let level = self.level;
        if level == DriftLevel::Drift {
            self.reset();
        }
        Ok(level)
    }
}
