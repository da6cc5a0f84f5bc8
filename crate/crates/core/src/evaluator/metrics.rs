use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::learner::{Model, Sample};
use crate::par::{self, Exec};

/// `R[i][j]`: accuracy on task `j` after training through task `i`, `j <= i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, EvalError> {
        if rows.is_empty() {
            return Err(EvalError::EmptyList);
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != i + 1 || r.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(EvalError::MalformedMatrix);
            }
        }
        Ok(Self { rows })
    }

    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j]
    }
}

/// Mean change in accuracy on earlier tasks after the last task was learned.
pub fn bwt(r: &AccuracyMatrix) -> Result<f64, EvalError> {
    let t = r.tasks();
    if t < 2 {
        return Err(EvalError::SingleTask);
    }
    let last = &r.rows[t - 1];
    let sum: f64 = (0..t - 1).map(|i| last[i] - r.rows[i][i]).sum();
    Ok(sum / (t - 1) as f64)
}

/// Mean accuracy over all tasks after the last one.
pub fn final_accuracy(r: &AccuracyMatrix) -> f64 {
    let last = r.rows.last().expect("non-empty");
    last.iter().sum::<f64>() / last.len() as f64
}

fn relative_cost(costs: &[f64]) -> Result<f64, EvalError> {
    if costs.is_empty() {
        return Err(EvalError::EmptyList);
    }
    if costs.iter().any(|&c| !(c > 0.0)) {
        return Err(EvalError::NonPositive);
    }
    let first = costs[0];
    let mean = costs.iter().map(|c| first / c).sum::<f64>() / costs.len() as f64;
    Ok(mean.min(1.0))
}

/// `min(1, mean_i(size_1 / size_i))` over per-task checkpoint sizes.
pub fn ms_efficiency(sizes: &[usize]) -> Result<f64, EvalError> {
    relative_cost(&sizes.iter().map(|&s| s as f64).collect::<Vec<_>>())
}

/// Same form as [`ms_efficiency`], with SGD steps as the cost unit.
pub fn ce_efficiency(step_counts: &[usize]) -> Result<f64, EvalError> {
    relative_cost(&step_counts.iter().map(|&s| s as f64).collect::<Vec<_>>())
}

/// Fraction of `data` the model classifies correctly.
pub fn accuracy<S: Sample>(model: &Model, data: &[S]) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let mut correct = 0usize;
    for s in data {
        let label = s.label().ok_or(EvalError::Unlabeled)?;
        let (pred, _) = model.predict(s.features()).map_err(|e| EvalError::Model(e.to_string()))?;
        if pred == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc_matrix: AccuracyMatrix,
    /// `None` for a single task.
    pub bwt: Option<f64>,
    pub final_acc: f64,
    pub ms_efficiency: f64,
    pub ce_efficiency: f64,
    pub wall_clock_per_task: Vec<f64>,
}

/// One checkpoint of a lineage with what it cost to produce.
#[derive(Debug, Clone)]
pub struct LineageEntry {
    pub model: Model,
    pub steps: usize,
    pub wall_clock_secs: f64,
}

/// Evaluates every checkpoint against the test sets of all tasks seen so far.
pub fn profile<S: Sample>(lineage: &[LineageEntry], test_sets: &[Vec<S>]) -> Result<MetricReport, EvalError> {
    profile_with(Exec::default(), lineage, test_sets)
}

pub fn profile_with<S: Sample>(
    exec: Exec,
    lineage: &[LineageEntry],
    test_sets: &[Vec<S>],
) -> Result<MetricReport, EvalError> {
    if lineage.is_empty() {
        return Err(EvalError::EmptyList);
    }
    if test_sets.len() < lineage.len() {
        return Err(EvalError::MissingTestSet(test_sets.len()));
    }
    if let Some(j) = test_sets.iter().take(lineage.len()).position(|t| t.is_empty()) {
        return Err(EvalError::MissingTestSet(j));
    }
    let cells: Vec<(usize, usize)> = (0..lineage.len()).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let accs = par::map_with(exec, &cells, |&(i, j)| accuracy(&lineage[i].model, &test_sets[j]));
    let mut rows: Vec<Vec<f64>> = (0..lineage.len()).map(|i| Vec::with_capacity(i + 1)).collect();
    for (&(i, _), a) in cells.iter().zip(accs) {
        rows[i].push(a?);
    }
    let acc_matrix = AccuracyMatrix::from_rows(rows)?;
    let sizes: Vec<usize> = lineage.iter().map(|e| e.model.params.len()).collect();
    let steps: Vec<usize> = lineage.iter().map(|e| e.steps.max(1)).collect();
    Ok(MetricReport {
        bwt: bwt(&acc_matrix).ok(),
        final_acc: final_accuracy(&acc_matrix),
        ms_efficiency: ms_efficiency(&sizes)?,
        ce_efficiency: ce_efficiency(&steps)?,
        wall_clock_per_task: lineage.iter().map(|e| e.wall_clock_secs).collect(),
        acc_matrix,
    })
}
