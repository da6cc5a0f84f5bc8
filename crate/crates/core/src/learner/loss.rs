//! Cross-entropy with analytic gradients, plus the EWC and SI penalties.

use serde::{Deserialize, Serialize};

use super::model::{Model, Sample};
use super::LearnerError;
use crate::par::{self, Exec};

const CHUNK: usize = 64;

/// Quadratic anchor weighted by the diagonal Fisher information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EwcAnchor {
    pub theta_star: Vec<f64>,
    pub fisher_diag: Vec<f64>,
    pub lambda: f64,
}

/// Path-integral importance state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiState {
    /// Per-parameter contribution to the loss decrease in the current task.
    pub omega_running: Vec<f64>,
    /// Consolidated importance over finished tasks.
    pub omega: Vec<f64>,
    /// Parameters at the end of the previous task (start of the current one).
    pub theta_star: Vec<f64>,
    pub xi: f64,
    pub c: f64,
}

impl SiState {
    pub fn new(theta_start: &[f64], xi: f64, c: f64) -> Self {
        Self {
            omega_running: vec![0.0; theta_start.len()],
            omega: vec![0.0; theta_start.len()],
            theta_star: theta_start.to_vec(),
            xi,
            c,
        }
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), LearnerError> {
    if expected != got {
        return Err(LearnerError::LengthMismatch { expected, got });
    }
    Ok(())
}

/// `(λ/2) Σ F_i (θ_i − θ*_i)²`.
pub fn ewc_penalty(theta: &[f64], anchor: &EwcAnchor) -> Result<f64, LearnerError> {
    check_len(theta.len(), anchor.theta_star.len())?;
    check_len(theta.len(), anchor.fisher_diag.len())?;
    let s: f64 = theta
        .iter()
        .zip(&anchor.theta_star)
        .zip(&anchor.fisher_diag)
        .map(|((t, s), f)| f * (t - s) * (t - s))
        .sum();
    Ok(0.5 * anchor.lambda * s)
}

fn ewc_grad(theta: &[f64], anchor: &EwcAnchor, grad: &mut [f64]) {
    for i in 0..theta.len() {
        grad[i] += anchor.lambda * anchor.fisher_diag[i] * (theta[i] - anchor.theta_star[i]);
    }
}

/// `c Σ Ω_i (θ_i − θ*_i)²`.
pub fn si_penalty(theta: &[f64], state: &SiState) -> Result<f64, LearnerError> {
    check_len(theta.len(), state.theta_star.len())?;
    check_len(theta.len(), state.omega.len())?;
    let s: f64 = theta
        .iter()
        .zip(&state.theta_star)
        .zip(&state.omega)
        .map(|((t, s), w)| w * (t - s) * (t - s))
        .sum();
    Ok(state.c * s)
}

fn si_grad(theta: &[f64], state: &SiState, grad: &mut [f64]) {
    for i in 0..theta.len() {
        grad[i] += 2.0 * state.c * state.omega[i] * (theta[i] - state.theta_star[i]);
    }
}

/// Accumulates `ω_i ← ω_i − g_i Δθ_i` for one optimizer step.
pub fn si_step(state: &mut SiState, grad: &[f64], delta_theta: &[f64]) -> Result<(), LearnerError> {
    check_len(state.omega_running.len(), grad.len())?;
    check_len(state.omega_running.len(), delta_theta.len())?;
    for ((w, g), d) in state.omega_running.iter_mut().zip(grad).zip(delta_theta) {
        *w -= g * d;
    }
    Ok(())
}

/// Folds the finished task into `Ω`, then re-anchors at `theta_new`.
///
/// `Ω_i ← Ω_i + max(ω_i, 0) / ((θ_new_i − θ*_i)² + ξ)`.
pub fn si_consolidate(state: &mut SiState, theta_new: &[f64]) -> Result<(), LearnerError> {
    check_len(state.theta_star.len(), theta_new.len())?;
    for i in 0..theta_new.len() {
        let moved = theta_new[i] - state.theta_star[i];
        // si_step accepts arbitrary steps, so ω may be negative here
        state.omega[i] += state.omega_running[i].max(0.0) / (moved * moved + state.xi);
        state.omega_running[i] = 0.0;
    }
    state.theta_star = theta_new.to_vec();
    Ok(())
}

/// Adds `∂(−log p_y)/∂θ` for one sample into `grad` and returns `−log p_y`.
pub(crate) fn accumulate_nll_grad(model: &Model, x: &[f64], y: usize, grad: &mut [f64]) -> f64 {
    let l = model.layout();
    let p = &model.params.values;
    let act = model.activations(x);
    let width = l.feature_width();
    let (ow, ob) = (l.out_w(), l.out_b());

    let nll = -act.probs[y].max(f64::MIN_POSITIVE).ln();
    let dz: Vec<f64> = act.probs.iter().enumerate().map(|(c, &pc)| if c == y { pc - 1.0 } else { pc }).collect();

    for c in 0..l.num_classes {
        let row = &mut grad[ow + c * width..ow + (c + 1) * width];
        for (g, h) in row.iter_mut().zip(&act.hidden) {
            *g += dz[c] * h;
        }
        grad[ob + c] += dz[c];
    }
    if l.hidden_dim > 0 {
        let b1 = l.hidden_dim * l.input_dim;
        for k in 0..l.hidden_dim {
            let back: f64 = (0..l.num_classes).map(|c| p[ow + c * width + k] * dz[c]).sum();
            let da = back * (1.0 - act.hidden[k] * act.hidden[k]);
            let row = &mut grad[k * l.input_dim..(k + 1) * l.input_dim];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += da * xi;
            }
            grad[b1 + k] += da;
        }
    }
    nll
}

fn checked_label<S: Sample>(model: &Model, s: &S) -> Result<usize, LearnerError> {
    let y = s.label().ok_or(LearnerError::UnlabeledBatch)? as usize;
    if y >= model.num_classes() {
        return Err(LearnerError::UnknownClass { class: y as u32, known: model.num_classes() });
    }
    if s.features().len() != model.layout().input_dim {
        return Err(LearnerError::DimensionMismatch { expected: model.layout().input_dim, got: s.features().len() });
    }
    Ok(y)
}

/// Mean cross-entropy plus any penalties, and its exact gradient.
pub fn loss_and_grad<S: Sample>(
    model: &Model,
    batch: &[S],
    ewc: Option<&EwcAnchor>,
    si: Option<&SiState>,
) -> Result<(f64, Vec<f64>), LearnerError> {
    loss_and_grad_with(Exec::default(), model, batch, ewc, si)
}

/// [`loss_and_grad`] with an explicit execution mode. Both modes sum the same
/// fixed chunks in the same order and agree bit for bit.
pub fn loss_and_grad_with<S: Sample>(
    exec: Exec,
    model: &Model,
    batch: &[S],
    ewc: Option<&EwcAnchor>,
    si: Option<&SiState>,
) -> Result<(f64, Vec<f64>), LearnerError> {
    if batch.is_empty() {
        return Err(LearnerError::EmptyData);
    }
    let labels: Vec<usize> = batch.iter().map(|s| checked_label(model, s)).collect::<Result<_, _>>()?;
    let n = model.params.len();
    let pairs: Vec<(&S, usize)> = batch.iter().zip(labels).collect();
    let partials = par::map_chunks_with(exec, &pairs, CHUNK, |chunk| {
        let mut g = vec![0.0; n];
        let mut loss = 0.0;
        for (s, y) in chunk {
            loss += accumulate_nll_grad(model, s.features(), *y, &mut g);
        }
        (loss, g)
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    for (l, g) in partials {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let inv = 1.0 / batch.len() as f64;
    loss *= inv;
    grad.iter_mut().for_each(|g| *g *= inv);

    let theta = &model.params.values;
    if let Some(a) = ewc {
        loss += ewc_penalty(theta, a)?;
        ewc_grad(theta, a, &mut grad);
    }
    if let Some(s) = si {
        loss += si_penalty(theta, s)?;
        si_grad(theta, s, &mut grad);
    }
    Ok((loss, grad))
}

/// Empirical diagonal Fisher `(1/N) Σ (∂ log p(y|x) / ∂θ_i)²`.
///
/// Uses up to `n_samples` evenly spaced samples from `data`.
pub fn fisher_diag<S: Sample>(model: &Model, data: &[S], n_samples: usize) -> Result<Vec<f64>, LearnerError> {
    if data.is_empty() || n_samples == 0 {
        return Err(LearnerError::EmptyData);
    }
    let take = n_samples.min(data.len());
    let picked: Vec<&S> = (0..take).map(|i| &data[i * data.len() / take]).collect();
    let labels: Vec<usize> = picked.iter().map(|s| checked_label(model, *s)).collect::<Result<_, _>>()?;
    let pairs: Vec<(&S, usize)> = picked.into_iter().zip(labels).collect();
    let n = model.params.len();
    let partials = par::map_chunks_with(Exec::default(), &pairs, CHUNK, |chunk| {
        let mut acc = vec![0.0; n];
        let mut g = vec![0.0; n];
        for (s, y) in chunk {
            g.iter_mut().for_each(|v| *v = 0.0);
            accumulate_nll_grad(model, s.features(), *y, &mut g);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v * v;
            }
        }
        acc
    });
    let mut fisher = vec![0.0; n];
    for p in partials {
        for (a, b) in fisher.iter_mut().zip(p) {
            *a += b;
        }
    }
    let inv = 1.0 / take as f64;
    fisher.iter_mut().for_each(|f| *f *= inv);
    Ok(fisher)
}
