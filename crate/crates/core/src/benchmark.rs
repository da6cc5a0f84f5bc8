//! Two-task class-incremental forgetting benchmark.
//!
//! Task A has two Gaussian classes, task B adds two new ones. A model is
//! trained on A, then updated on B alone (no rehearsal) with one of three
//! losses, and both task test sets are scored after each step.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ClPolicy, LossKind};
use crate::evaluator::{profile, EvalError, LineageEntry, MetricReport};
use crate::learner::{train, ContinualState, Example, Layout, LearnerError, Model, Scenario};
use crate::par::{self, Exec};
use crate::synthetic::{axis_pair, sample_classes};

#[derive(Debug, thiserror::Error)]
pub enum BenchmarkError {
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FineTune,
    Ewc,
    Si,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::FineTune, Method::Ewc, Method::Si];

    fn loss(self) -> LossKind {
        match self {
            Method::FineTune => LossKind::None,
            Method::Ewc => LossKind::Ewc,
            Method::Si => LossKind::Si,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgettingSetup {
    pub dim: usize,
    pub hidden_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Distance of each class mean from the origin.
    pub separation: f64,
    pub std: f64,
    /// Learning settings shared by all methods; `loss` is overridden.
    pub policy: ClPolicy,
    pub seed: u64,
}

impl Default for ForgettingSetup {
    fn default() -> Self {
        Self {
            dim: 10,
            hidden_dim: 0,
            train_per_class: 500,
            test_per_class: 200,
            separation: 2.0,
            std: 1.0,
            policy: ClPolicy { lambda: 100.0, si_c: 0.1, ..ClPolicy::default() },
            seed: 7,
        }
    }
}

/// Train/test splits for both tasks.
#[derive(Debug, Clone)]
pub struct TwoTasks {
    pub train: [Vec<Example>; 2],
    pub test: [Vec<Example>; 2],
}

impl ForgettingSetup {
    pub fn tasks(&self) -> TwoTasks {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = axis_pair(self.dim, 0, self.separation, self.std, [0, 1]);
        let b = axis_pair(self.dim, 1, self.separation, self.std, [2, 3]);
        TwoTasks {
            train: [sample_classes(&a, self.train_per_class, &mut rng), sample_classes(&b, self.train_per_class, &mut rng)],
            test: [sample_classes(&a, self.test_per_class, &mut rng), sample_classes(&b, self.test_per_class, &mut rng)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub report: MetricReport,
}

impl MethodResult {
    pub fn bwt(&self) -> f64 {
        self.report.bwt.unwrap_or(0.0)
    }

    /// Accuracy on task A after learning task B.
    pub fn retained(&self) -> f64 {
        self.report.acc_matrix.get(1, 0)
    }
}

pub fn run_method(setup: &ForgettingSetup, tasks: &TwoTasks, method: Method) -> Result<MethodResult, BenchmarkError> {
    let policy = ClPolicy { loss: method.loss(), rehearsal_ratio: 0.0, ..setup.policy.clone() };
    let init = Model::init(Layout::new(setup.dim, setup.hidden_dim, 2), setup.seed);
    let none: &[Example] = &[];
    let first = train(&init, &tasks.train[0], none, Scenario::Offline, &policy, &ContinualState::default(), setup.seed)?;
    let second = train(&first.model, &tasks.train[1], none, Scenario::Nc, &policy, &first.state, setup.seed + 1)?;
    let lineage = [
        LineageEntry { model: first.model, steps: first.report.steps, wall_clock_secs: first.report.wall_clock_secs },
        LineageEntry { model: second.model, steps: second.report.steps, wall_clock_secs: second.report.wall_clock_secs },
    ];
    let report = profile(&lineage, &tasks.test)?;
    Ok(MethodResult { method, report })
}

/// Runs every method on the same seeded tasks.
pub fn run_all(setup: &ForgettingSetup, exec: Exec) -> Result<Vec<MethodResult>, BenchmarkError> {
    let tasks = setup.tasks();
    par::map_with(exec, &Method::ALL, |&m| run_method(setup, &tasks, m)).into_iter().collect()
}
