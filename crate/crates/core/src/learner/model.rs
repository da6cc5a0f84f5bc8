use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::LearnerError;
use crate::config::ModelSpec;
use crate::data::{ClassId, RequestRecord};

/// Shape of the classifier. `hidden_dim = 0` is multinomial logistic
/// regression; otherwise one tanh hidden layer.
///
/// Flat parameter layout, all matrices row-major:
/// `[W1 (h x d), b1 (h), W2 (C x h), b2 (C)]`, or `[W (C x d), b (C)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl Layout {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self { input_dim, hidden_dim, num_classes }
    }

    pub fn from_spec(spec: &ModelSpec) -> Self {
        Self::new(spec.input_dim, spec.hidden_dim, spec.num_classes)
    }

    /// Width of the representation feeding the output layer.
    pub fn feature_width(&self) -> usize {
        if self.hidden_dim == 0 { self.input_dim } else { self.hidden_dim }
    }

    fn hidden_block(&self) -> usize {
        if self.hidden_dim == 0 { 0 } else { self.hidden_dim * (self.input_dim + 1) }
    }

    pub fn param_count(&self) -> usize {
        self.hidden_block() + self.num_classes * (self.feature_width() + 1)
    }

    /// Offset of the output weight matrix.
    pub fn out_w(&self) -> usize {
        self.hidden_block()
    }

    /// Offset of the output bias.
    pub fn out_b(&self) -> usize {
        self.out_w() + self.num_classes * self.feature_width()
    }

    pub fn with_classes(&self, num_classes: usize) -> Self {
        Self { num_classes, ..*self }
    }

    /// Re-lays `values` (shaped by `self`) for `target`, which may only differ
    /// in class count. New output rows are set to `fill`.
    pub fn remap(&self, values: &[f64], target: &Layout, fill: f64) -> Vec<f64> {
        assert_eq!(self.input_dim, target.input_dim);
        assert_eq!(self.hidden_dim, target.hidden_dim);
        assert!(target.num_classes >= self.num_classes);
        let width = self.feature_width();
        let mut out = Vec::with_capacity(target.param_count());
        out.extend_from_slice(&values[..self.out_b()]);
        out.resize(target.out_b(), fill);
        out.extend_from_slice(&values[self.out_b()..]);
        out.resize(target.param_count(), fill);
        debug_assert_eq!(out.len(), target.out_w() + target.num_classes * (width + 1));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn zeros(layout: Layout) -> Self {
        Self { layout, values: vec![0.0; layout.param_count()] }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self, LearnerError> {
        if values.len() != layout.param_count() {
            return Err(LearnerError::LengthMismatch { expected: layout.param_count(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LearnerError::NumericalDivergence);
        }
        Ok(Self { layout, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Intermediate values of one forward pass, reused by backprop.
pub(crate) struct Activations {
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: ParameterVector,
}

impl Model {
    pub fn zeros(layout: Layout) -> Self {
        Self { params: ParameterVector::zeros(layout) }
    }

    /// Seeded initialization: uniform Glorot weights for the hidden layer,
    /// zeros elsewhere. A zero hidden layer is a saddle point of the loss.
    pub fn init(layout: Layout, seed: u64) -> Self {
        use rand::{Rng, SeedableRng};
        let mut m = Self::zeros(layout);
        if layout.hidden_dim > 0 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bound = (6.0 / (layout.input_dim + layout.hidden_dim) as f64).sqrt();
            for w in &mut m.params.values[..layout.hidden_dim * layout.input_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }
        m
    }

    pub fn layout(&self) -> Layout {
        self.params.layout
    }

    pub fn num_classes(&self) -> usize {
        self.params.layout.num_classes
    }

    pub fn known_classes(&self) -> Vec<ClassId> {
        (0..self.num_classes() as ClassId).collect()
    }

    pub(crate) fn activations(&self, x: &[f64]) -> Activations {
        let l = self.layout();
        let p = &self.params.values;
        let hidden: Vec<f64> = if l.hidden_dim == 0 {
            x.to_vec()
        } else {
            let b1 = l.hidden_dim * l.input_dim;
            (0..l.hidden_dim)
                .map(|k| {
                    let row = &p[k * l.input_dim..(k + 1) * l.input_dim];
                    (dot(row, x) + p[b1 + k]).tanh()
                })
                .collect()
        };
        let width = l.feature_width();
        let (w, b) = (l.out_w(), l.out_b());
        let logits: Vec<f64> =
            (0..l.num_classes).map(|c| dot(&p[w + c * width..w + (c + 1) * width], &hidden) + p[b + c]).collect();
        Activations { hidden, probs: softmax(&logits) }
    }

    /// Output logits, mainly for inspecting layer expansion.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, LearnerError> {
        self.check_dim(x)?;
        let act = self.activations(x);
        let l = self.layout();
        let p = &self.params.values;
        let width = l.feature_width();
        Ok((0..l.num_classes)
            .map(|c| dot(&p[l.out_w() + c * width..l.out_w() + (c + 1) * width], &act.hidden) + p[l.out_b() + c])
            .collect())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), LearnerError> {
        if x.len() != self.layout().input_dim {
            return Err(LearnerError::DimensionMismatch { expected: self.layout().input_dim, got: x.len() });
        }
        Ok(())
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, LearnerError> {
        self.check_dim(x)?;
        Ok(self.activations(x).probs)
    }

    /// Arg-max class (lowest id on ties) and its probability.
    pub fn predict(&self, x: &[f64]) -> Result<(ClassId, f64), LearnerError> {
        let probs = self.forward(x)?;
        let (c, p) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        Ok((c as ClassId, p))
    }

    /// Returns a copy with `num_classes` outputs; new rows are zero.
    pub fn expand_classes(&self, num_classes: usize) -> Model {
        if num_classes <= self.num_classes() {
            return self.clone();
        }
        let from = self.layout();
        let to = from.with_classes(num_classes);
        Model { params: ParameterVector { layout: to, values: from.remap(&self.params.values, &to, 0.0) } }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: 1,
            layout: self.layout(),
            theta: self.params.values.clone(),
            known_classes: self.known_classes(),
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Serialized model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub layout: Layout,
    pub theta: Vec<f64>,
    pub known_classes: Vec<ClassId>,
}

impl Checkpoint {
    /// Byte-stable JSON encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnerError> {
        let c: Checkpoint =
            serde_json::from_slice(bytes).map_err(|e| LearnerError::InvalidCheckpoint(e.to_string()))?;
        if c.schema_version != 1 {
            return Err(LearnerError::InvalidCheckpoint(format!("unsupported schema_version {}", c.schema_version)));
        }
        if c.theta.len() != c.layout.param_count() {
            return Err(LearnerError::LengthMismatch { expected: c.layout.param_count(), got: c.theta.len() });
        }
        Ok(c)
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn into_model(self) -> Model {
        Model { params: ParameterVector { layout: self.layout, values: self.theta } }
    }
}

/// A labeled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: ClassId,
}

/// Anything the learner can train or evaluate on.
pub trait Sample: Sync {
    fn features(&self) -> &[f64];
    fn label(&self) -> Option<ClassId>;
}

impl Sample for Example {
    fn features(&self) -> &[f64] {
        &self.features
    }

    fn label(&self) -> Option<ClassId> {
        Some(self.label)
    }
}

impl Sample for RequestRecord {
    fn features(&self) -> &[f64] {
        &self.features
    }

    fn label(&self) -> Option<ClassId> {
        self.label
    }
}

impl<T: Sample> Sample for &T {
    fn features(&self) -> &[f64] {
        (**self).features()
    }

    fn label(&self) -> Option<ClassId> {
        (**self).label()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_is_uniform() {
        for layout in [Layout::new(3, 0, 4), Layout::new(3, 5, 4)] {
            let m = Model::zeros(layout);
            let p = m.forward(&[0.3, -2.0, 7.0]).unwrap();
            assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn logistic_bias_example() {
        let layout = Layout::new(2, 0, 2);
        let mut m = Model::zeros(layout);
        let b = layout.out_b();
        m.params.values[b + 1] = 10.0;
        let p = m.forward(&[1.0, -1.0]).unwrap();
        // closed form: 1 / (1 + e^10)
        let low = 1.0 / (1.0 + 10f64.exp());
        assert!((p[0] - low).abs() < 1e-15);
        assert!((p[0] - 4.5397868702e-5).abs() < 1e-14);
        assert!((p[1] - 0.9999546).abs() < 1e-7);
    }

    #[test]
    fn wrong_input_dimension() {
        let m = Model::zeros(Layout::new(2, 0, 2));
        assert_eq!(m.forward(&[1.0]), Err(LearnerError::DimensionMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn param_counts() {
        assert_eq!(Layout::new(10, 0, 2).param_count(), 22);
        assert_eq!(Layout::new(4, 3, 2).param_count(), 3 * 5 + 2 * 4);
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let mut m = Model::zeros(Layout::new(2, 2, 3));
        for (i, v) in m.params.values.iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let c = m.checkpoint();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.digest(), c.digest());
        assert_eq!(back.into_model(), m);
    }
}
