//! Local trainers: a pluggable interface and two convex reference models
//! (linear regression and a softmax classifier).
//!
//! Parameter layout is always the weight matrix in row-major order followed
//! by the bias terms. For the classifier the weight matrix is `C × d`, one
//! row per class.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithms::{fedprox_objective, AlgoError, PredictionBatch};
use crate::params::{axpy, ParamError, ParameterVector};
use crate::rng::derive_rng;

/// Half-width of the uniform initialization interval for weights.
pub const INIT_SCALE: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("parameter dim {got} does not match model layout {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("feature dim {got} does not match model input dim {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("epochs_per_round must be at least 1")]
    ZeroEpochs,
    #[error("minibatch size must be at least 1")]
    ZeroBatch,
    #[error("class_count must be at least 2 for a classifier")]
    InvalidClassCount,
    #[error("mu must be nonnegative, got {0}")]
    NegativeMu(f64),
    #[error("proximal training (mu > 0) requires the global model")]
    MissingGlobal,
    #[error("operation requires a classifier model")]
    NotClassifier,
    #[error("label kind does not match model kind")]
    LabelKindMismatch,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// Supervised targets of a [`LabeledDataset`].
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `n × d` feature matrix (row-major) with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f64>,
    labels: Labels,
}

impl LabeledDataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Labels) -> Result<Self, TrainError> {
        if dim == 0 && !features.is_empty() {
            return Err(TrainError::InvalidDataset("zero feature dim with nonempty features".into()));
        }
        let rows = if dim == 0 { labels.len() } else { features.len() / dim };
        if dim > 0 && features.len() % dim != 0 {
            return Err(TrainError::InvalidDataset(format!(
                "{} feature values do not divide into rows of {dim}",
                features.len()
            )));
        }
        if rows != labels.len() {
            return Err(TrainError::InvalidDataset(format!(
                "{rows} feature rows but {} labels",
                labels.len()
            )));
        }
        Ok(Self { dim, features, labels })
    }

    pub fn empty(dim: usize, classification: bool) -> Self {
        let labels = if classification {
            Labels::Classes(Vec::new())
        } else {
            Labels::Targets(Vec::new())
        };
        Self { dim, features: Vec::new(), labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        let labels = match &self.labels {
            Labels::Classes(v) => Labels::Classes(indices.iter().map(|&i| v[i]).collect()),
            Labels::Targets(v) => Labels::Targets(indices.iter().map(|&i| v[i]).collect()),
        };
        Self { dim: self.dim, features, labels }
    }

    /// Row-wise concatenation. All parts must share dim and label kind.
    pub fn concat(parts: &[&LabeledDataset]) -> Result<Self, TrainError> {
        let first = parts
            .first()
            .ok_or_else(|| TrainError::InvalidDataset("nothing to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = match first.labels {
            Labels::Classes(_) => Labels::Classes(Vec::new()),
            Labels::Targets(_) => Labels::Targets(Vec::new()),
        };
        for p in parts {
            if p.dim != first.dim {
                return Err(TrainError::FeatureDimMismatch { expected: first.dim, got: p.dim });
            }
            features.extend_from_slice(&p.features);
            match (&mut labels, &p.labels) {
                (Labels::Classes(acc), Labels::Classes(v)) => acc.extend_from_slice(v),
                (Labels::Targets(acc), Labels::Targets(v)) => acc.extend_from_slice(v),
                _ => return Err(TrainError::LabelKindMismatch),
            }
        }
        Ok(Self { dim: first.dim, features, labels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LinearRegression,
    SoftmaxClassifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    FullBatch,
    Minibatch(usize),
}

fn default_epochs() -> u32 {
    1
}

/// Local training configuration shared by every site of a federation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSpec {
    pub model_kind: ModelKind,
    pub input_dim: usize,
    /// Number of classes; ignored for regression.
    #[serde(default)]
    pub class_count: usize,
    pub learning_rate: f64,
    /// Minibatch size; absent means full-batch gradient descent.
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default = "default_epochs")]
    pub epochs_per_round: u32,
    #[serde(default)]
    pub seed: u64,
}

impl TrainerSpec {
    pub fn classifier(input_dim: usize, class_count: usize, learning_rate: f64) -> Self {
        Self {
            model_kind: ModelKind::SoftmaxClassifier,
            input_dim,
            class_count,
            learning_rate,
            batch_size: None,
            epochs_per_round: 1,
            seed: 0,
        }
    }

    pub fn regression(input_dim: usize, learning_rate: f64) -> Self {
        Self {
            model_kind: ModelKind::LinearRegression,
            input_dim,
            class_count: 0,
            learning_rate,
            batch_size: None,
            epochs_per_round: 1,
            seed: 0,
        }
    }

    pub fn batch_mode(&self) -> BatchMode {
        match self.batch_size {
            None => BatchMode::FullBatch,
            Some(size) => BatchMode::Minibatch(size),
        }
    }

    pub fn is_classifier(&self) -> bool {
        self.model_kind == ModelKind::SoftmaxClassifier
    }

    /// Number of model outputs: `C` for the classifier, 1 for regression.
    pub fn outputs(&self) -> usize {
        match self.model_kind {
            ModelKind::LinearRegression => 1,
            ModelKind::SoftmaxClassifier => self.class_count,
        }
    }

    pub fn param_dim(&self) -> usize {
        self.outputs() * (self.input_dim + 1)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidLearningRate(self.learning_rate));
        }
        if self.epochs_per_round == 0 {
            return Err(TrainError::ZeroEpochs);
        }
        if self.batch_size == Some(0) {
            return Err(TrainError::ZeroBatch);
        }
        if self.is_classifier() && self.class_count < 2 {
            return Err(TrainError::InvalidClassCount);
        }
        Ok(())
    }

    fn check_inputs(&self, params: &ParameterVector, data: &LabeledDataset) -> Result<(), TrainError> {
        if params.dim() != self.param_dim() {
            return Err(TrainError::DimMismatch { expected: self.param_dim(), got: params.dim() });
        }
        if data.dim() != self.input_dim {
            return Err(TrainError::FeatureDimMismatch { expected: self.input_dim, got: data.dim() });
        }
        match (self.model_kind, data.labels()) {
            (ModelKind::SoftmaxClassifier, Labels::Classes(v)) => {
                if let Some(&bad) = v.iter().find(|&&c| c >= self.class_count) {
                    return Err(TrainError::InvalidDataset(format!(
                        "label {bad} outside [0, {})",
                        self.class_count
                    )));
                }
                Ok(())
            }
            (ModelKind::LinearRegression, Labels::Targets(_)) => Ok(()),
            _ => Err(TrainError::LabelKindMismatch),
        }
    }

    /// Raw model outputs for row `x`, written into `out` (length `outputs()`).
    fn forward_row(&self, params: &[f64], x: &[f64], out: &mut [f64]) {
        let d = self.input_dim;
        let bias = &params[self.outputs() * d..];
        for (c, o) in out.iter_mut().enumerate() {
            let w = &params[c * d..(c + 1) * d];
            *o = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias[c];
        }
    }
}

/// The operations a site needs from its local model.
///
/// Implementations must be pure: no interior mutation of shared state.
pub trait LocalTrainer {
    fn param_dim(&self) -> usize;

    /// Per-sample-mean loss and its exact gradient.
    fn loss_and_grad(&self, params: &ParameterVector, data: &LabeledDataset) -> Result<(f64, ParameterVector), TrainError>;

    /// Class probabilities per sample; region mask all-true.
    fn predict_proba(&self, params: &ParameterVector, data: &LabeledDataset) -> Result<PredictionBatch, TrainError>;

    /// Pulls a gradient with respect to the per-sample logits (row-major
    /// `n × C`) back to the parameters: returns `Σ_j J_jᵀ dlogits_j`.
    fn logits_backward(&self, params: &ParameterVector, data: &LabeledDataset, dlogits: &[f64]) -> Result<ParameterVector, TrainError>;
}

impl LocalTrainer for TrainerSpec {
    fn param_dim(&self) -> usize {
        TrainerSpec::param_dim(self)
    }

    fn loss_and_grad(&self, params: &ParameterVector, data: &LabeledDataset) -> Result<(f64, ParameterVector), TrainError> {
        loss_and_grad(self, params, data)
    }

    fn predict_proba(&self, params: &ParameterVector, data: &LabeledDataset) -> Result<PredictionBatch, TrainError> {
        predict_proba(self, params, data)
    }

    fn logits_backward(&self, params: &ParameterVector, data: &LabeledDataset, dlogits: &[f64]) -> Result<ParameterVector, TrainError> {
        self.check_inputs(params, data)?;
        let (d, c_count) = (self.input_dim, self.outputs());
        if dlogits.len() != data.len() * c_count {
            return Err(TrainError::InvalidDataset(format!(
                "logit gradient has {} entries, expected {}",
                dlogits.len(),
                data.len() * c_count
            )));
        }
        let mut grad = vec![0.0; self.param_dim()];
        for j in 0..data.len() {
            let x = data.row(j);
            for c in 0..c_count {
                let g = dlogits[j * c_count + c];
                if g == 0.0 {
                    continue;
                }
                for (gw, xk) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *gw += g * xk;
                }
                grad[c_count * d + c] += g;
            }
        }
        Ok(ParameterVector::new(grad))
    }
}

/// Deterministic initial parameters: weights uniform in `(−0.05, 0.05)`
/// from `spec.seed`, biases zero.
pub fn init_params(spec: &TrainerSpec) -> ParameterVector {
    let mut rng = derive_rng(spec.seed, &[0x1417]);
    let n_weights = spec.outputs() * spec.input_dim;
    let mut values: Vec<f64> = (0..n_weights)
        .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
        .collect();
    values.resize(spec.param_dim(), 0.0);
    ParameterVector::new(values)
}

fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    for (o, z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Loss and gradient over the rows at `indices`, accumulated in index order.
fn loss_and_grad_rows(
    spec: &TrainerSpec,
    params: &ParameterVector,
    data: &LabeledDataset,
    indices: &[usize],
) -> (f64, ParameterVector) {
    let (d, c_count) = (spec.input_dim, spec.outputs());
    let p = params.as_slice();
    let mut grad = vec![0.0; spec.param_dim()];
    let mut loss = 0.0;
    let mut out = vec![0.0; c_count];
    let mut logp = vec![0.0; c_count];
    for &j in indices {
        let x = data.row(j);
        spec.forward_row(p, x, &mut out);
        match data.labels() {
            Labels::Classes(labels) => {
                log_softmax_into(&out, &mut logp);
                let y = labels[j];
                loss -= logp[y];
                for c in 0..c_count {
                    let r = logp[c].exp() - if c == y { 1.0 } else { 0.0 };
                    for (g, xk) in grad[c * d..(c + 1) * d].iter_mut().zip(x) {
                        *g += r * xk;
                    }
                    grad[c_count * d + c] += r;
                }
            }
            Labels::Targets(targets) => {
                let r = out[0] - targets[j];
                loss += r * r;
                for (g, xk) in grad[..d].iter_mut().zip(x) {
                    *g += 2.0 * r * xk;
                }
                grad[d] += 2.0 * r;
            }
        }
    }
    let n = indices.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, ParameterVector::new(grad))
}

/// Per-sample-mean loss (MSE or softmax cross-entropy) and its gradient.
pub fn loss_and_grad(
    spec: &TrainerSpec,
    params: &ParameterVector,
    data: &LabeledDataset,
) -> Result<(f64, ParameterVector), TrainError> {
    spec.check_inputs(params, data)?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    Ok(loss_and_grad_rows(spec, params, data, &indices))
}

/// Runs `epochs_per_round` epochs of gradient descent from `params`.
///
/// With `mu > 0` every step minimizes the proximal objective around
/// `w_global`. Minibatch order is a permutation drawn per epoch from
/// `(spec.seed, stream)`, so callers pass a distinct `stream` per site and
/// round to get independent but reproducible shuffles.
pub fn train_rounds(
    spec: &TrainerSpec,
    params: &ParameterVector,
    train_data: &LabeledDataset,
    mu: f64,
    w_global: Option<&ParameterVector>,
    stream: u64,
) -> Result<ParameterVector, TrainError> {
    spec.validate()?;
    spec.check_inputs(params, train_data)?;
    if !(mu >= 0.0) {
        return Err(TrainError::NegativeMu(mu));
    }
    let global = match (mu > 0.0, w_global) {
        (true, None) => return Err(TrainError::MissingGlobal),
        (true, Some(g)) => Some(g),
        (false, _) => None,
    };
    if train_data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }

    let n = train_data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = derive_rng(spec.seed, &[0x7e41, stream]);
    let mut w = params.clone();
    for _ in 0..spec.epochs_per_round {
        let batch = match spec.batch_mode() {
            BatchMode::FullBatch => n,
            BatchMode::Minibatch(size) => {
                order.shuffle(&mut rng);
                size
            }
        };
        for chunk in order.chunks(batch) {
            let (loss, grad) = loss_and_grad_rows(spec, &w, train_data, chunk);
            let grad = match global {
                Some(g) => fedprox_objective(loss, &grad, &w, g, mu)
                    .map_err(|e| match e {
                        AlgoError::Param(p) => TrainError::Param(p),
                        _ => TrainError::NegativeMu(mu),
                    })?
                    .1,
                None => grad,
            };
            w = axpy(-spec.learning_rate, &grad, &w)?;
        }
    }
    Ok(w)
}

/// Loss plus accuracy (classifier only).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

pub fn evaluate(spec: &TrainerSpec, params: &ParameterVector, data: &LabeledDataset) -> Result<Evaluation, TrainError> {
    let (loss, _) = loss_and_grad(spec, params, data)?;
    let accuracy = match data.labels() {
        Labels::Classes(labels) => {
            let mut out = vec![0.0; spec.outputs()];
            let correct = labels
                .iter()
                .enumerate()
                .filter(|(j, &y)| {
                    spec.forward_row(params.as_slice(), data.row(*j), &mut out);
                    argmax(&out) == y
                })
                .count();
            Some(correct as f64 / labels.len() as f64)
        }
        Labels::Targets(_) => None,
    };
    Ok(Evaluation { loss, accuracy })
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn predict_proba(spec: &TrainerSpec, params: &ParameterVector, data: &LabeledDataset) -> Result<PredictionBatch, TrainError> {
    if !spec.is_classifier() {
        return Err(TrainError::NotClassifier);
    }
    spec.check_inputs(params, data)?;
    let c_count = spec.outputs();
    let mut probs = vec![0.0; data.len() * c_count];
    let mut out = vec![0.0; c_count];
    for (j, row) in probs.chunks_mut(c_count).enumerate() {
        spec.forward_row(params.as_slice(), data.row(j), &mut out);
        log_softmax_into(&out, row);
        row.iter_mut().for_each(|p| *p = p.exp());
    }
    let labels = match data.labels() {
        Labels::Classes(v) => v.clone(),
        Labels::Targets(_) => unreachable!("checked above"),
    };
    Ok(PredictionBatch::new(c_count, probs, labels, vec![true; data.len()])
        .expect("softmax rows are valid distributions"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_classification(n: usize, d: usize, c: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..c)).collect();
        LabeledDataset::new(d, features, Labels::Classes(labels)).unwrap()
    }

    fn random_regression(n: usize, d: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        LabeledDataset::new(d, features, Labels::Targets(targets)).unwrap()
    }

    fn random_params(dim: usize, seed: u64) -> ParameterVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ParameterVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn central_difference<F: Fn(&ParameterVector) -> f64>(f: F, at: &ParameterVector, h: f64) -> Vec<f64> {
        (0..at.dim())
            .map(|k| {
                let mut plus = at.as_slice().to_vec();
                let mut minus = plus.clone();
                plus[k] += h;
                minus[k] -= h;
                (f(&ParameterVector::new(plus)) - f(&ParameterVector::new(minus))) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(analytic: &ParameterVector, numeric: &[f64]) {
        let scale = numeric.iter().map(|x| x.abs()).fold(1e-3, f64::max);
        for (a, n) in analytic.iter().zip(numeric) {
            assert!((a - n).abs() / scale < 1e-5, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn init_is_deterministic_with_expected_layout() {
        let spec = TrainerSpec::regression(3, 0.1);
        assert_eq!(init_params(&spec).dim(), 4);
        assert!(init_params(&spec).bit_eq(&init_params(&spec)));
        let clf = TrainerSpec::classifier(2, 3, 0.1);
        let p = init_params(&clf);
        assert_eq!(p.dim(), 9);
        assert!(p.as_slice()[..6].iter().all(|w| w.abs() < INIT_SCALE));
        assert_eq!(&p.as_slice()[6..], &[0.0, 0.0, 0.0]);
        let mut other = clf.clone();
        other.seed = 1;
        assert!(!init_params(&other).bit_eq(&p));
    }

    #[test]
    fn zero_regression_problem_has_zero_loss_and_grad() {
        let spec = TrainerSpec::regression(3, 0.1);
        let data = LabeledDataset::new(3, vec![0.0; 12], Labels::Targets(vec![0.0; 4])).unwrap();
        let (loss, grad) = loss_and_grad(&spec, &ParameterVector::zeros(4), &data).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            let spec = TrainerSpec::regression(3, 0.1);
            let data = random_regression(8, 3, seed);
            let p = random_params(4, seed + 100);
            let (_, g) = loss_and_grad(&spec, &p, &data).unwrap();
            let num = central_difference(|w| loss_and_grad(&spec, w, &data).unwrap().0, &p, 1e-6);
            assert_grad_close(&g, &num);

            let spec = TrainerSpec::classifier(3, 4, 0.1);
            let data = random_classification(8, 3, 4, seed);
            let p = random_params(16, seed + 200);
            let (_, g) = loss_and_grad(&spec, &p, &data).unwrap();
            let num = central_difference(|w| loss_and_grad(&spec, w, &data).unwrap().0, &p, 1e-6);
            assert_grad_close(&g, &num);
        }
    }

    #[test]
    fn duplicated_samples_leave_loss_unchanged() {
        let spec = TrainerSpec::classifier(3, 3, 0.1);
        let data = random_classification(6, 3, 3, 9);
        let doubled = LabeledDataset::concat(&[&data, &data]).unwrap();
        let p = random_params(12, 4);
        let (l1, g1) = loss_and_grad(&spec, &p, &data).unwrap();
        let (l2, g2) = loss_and_grad(&spec, &p, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        assert!(g1.max_abs_diff(&g2).unwrap() < 1e-14);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let spec = TrainerSpec::regression(3, 0.1);
        let empty = LabeledDataset::empty(3, false);
        assert_eq!(loss_and_grad(&spec, &ParameterVector::zeros(4), &empty), Err(TrainError::EmptyDataset));
        let data = random_regression(4, 3, 1);
        assert!(matches!(
            loss_and_grad(&spec, &ParameterVector::zeros(3), &data),
            Err(TrainError::DimMismatch { .. })
        ));
        assert_eq!(evaluate(&spec, &ParameterVector::zeros(4), &empty), Err(TrainError::EmptyDataset));
    }

    #[test]
    fn one_full_batch_epoch_is_a_single_gradient_step() {
        let spec = TrainerSpec::classifier(3, 3, 0.3);
        let data = random_classification(10, 3, 3, 2);
        let p = random_params(12, 3);
        let (_, g) = loss_and_grad(&spec, &p, &data).unwrap();
        let expected = axpy(-0.3, &g, &p).unwrap();
        let got = train_rounds(&spec, &p, &data, 0.0, None, 0).unwrap();
        assert!(got.bit_eq(&expected));
    }

    #[test]
    fn vanishing_learning_rate() {
        let mut spec = TrainerSpec::regression(3, 0.0);
        let data = random_regression(8, 3, 5);
        let p = random_params(4, 6);
        assert_eq!(
            train_rounds(&spec, &p, &data, 0.0, None, 0),
            Err(TrainError::InvalidLearningRate(0.0))
        );
        spec.learning_rate = 1e-300;
        let out = train_rounds(&spec, &p, &data, 0.0, None, 0).unwrap();
        assert!(out.max_abs_diff(&p).unwrap() < 1e-200);
    }

    #[test]
    fn proximal_training_requires_global_and_nonnegative_mu() {
        let spec = TrainerSpec::regression(3, 0.1);
        let data = random_regression(8, 3, 5);
        let p = random_params(4, 6);
        assert_eq!(train_rounds(&spec, &p, &data, 0.1, None, 0), Err(TrainError::MissingGlobal));
        assert_eq!(train_rounds(&spec, &p, &data, -0.1, Some(&p), 0), Err(TrainError::NegativeMu(-0.1)));
        // mu = 0 ignores the global model entirely
        let g = random_params(4, 7);
        let a = train_rounds(&spec, &p, &data, 0.0, Some(&g), 3).unwrap();
        let b = train_rounds(&spec, &p, &data, 0.0, None, 3).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn minibatch_training_is_reproducible_per_stream() {
        let mut spec = TrainerSpec::classifier(3, 3, 0.1);
        spec.batch_size = Some(3);
        spec.epochs_per_round = 2;
        let data = random_classification(10, 3, 3, 8);
        let p = random_params(12, 9);
        let a = train_rounds(&spec, &p, &data, 0.0, None, 11).unwrap();
        let b = train_rounds(&spec, &p, &data, 0.0, None, 11).unwrap();
        let c = train_rounds(&spec, &p, &data, 0.0, None, 12).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn full_batch_descent_is_monotone_on_convex_regression() {
        let spec = TrainerSpec::regression(3, 1e-3);
        let data = random_regression(20, 3, 42);
        let mut w = init_params(&spec);
        let mut prev = loss_and_grad(&spec, &w, &data).unwrap().0;
        for _ in 0..500 {
            w = train_rounds(&spec, &w, &data, 0.0, None, 0).unwrap();
            let l = loss_and_grad(&spec, &w, &data).unwrap().0;
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn predict_proba_properties() {
        let spec = TrainerSpec::classifier(2, 3, 0.1);
        let data = random_classification(5, 2, 3, 1);
        let uniform = predict_proba(&spec, &ParameterVector::zeros(9), &data).unwrap();
        assert!(uniform.probs().iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        for seed in 0..20 {
            let batch = predict_proba(&spec, &random_params(9, seed), &data).unwrap();
            for row in batch.probs().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // bias of +20 on class 1: p1 = 1 / (1 + 2 e^-20)
        let mut p = vec![0.0; 9];
        p[7] = 20.0;
        let batch = predict_proba(&spec, &ParameterVector::new(p), &data).unwrap();
        assert!(batch.probs().chunks(3).all(|r| r[1] > 0.99));
        assert!(batch.region_mask().iter().all(|m| *m));
        assert_eq!(
            predict_proba(&TrainerSpec::regression(2, 0.1), &ParameterVector::zeros(3), &random_regression(2, 2, 0)),
            Err(TrainError::NotClassifier)
        );
    }

    #[test]
    fn evaluate_matches_loss_and_reaches_full_accuracy_on_separable_data() {
        let spec = TrainerSpec::classifier(1, 2, 1.0);
        let data = LabeledDataset::new(1, vec![-2.0, -1.0, 1.0, 2.0], Labels::Classes(vec![0, 0, 1, 1])).unwrap();
        let mut w = init_params(&spec);
        for _ in 0..200 {
            w = train_rounds(&spec, &w, &data, 0.0, None, 0).unwrap();
        }
        let ev = evaluate(&spec, &w, &data).unwrap();
        assert_eq!(ev.accuracy, Some(1.0));
        assert_eq!(ev.loss, loss_and_grad(&spec, &w, &data).unwrap().0);
    }

    #[test]
    fn permuted_labels_give_chance_accuracy() {
        // balanced 2-class set with labels shuffled independently of features
        let spec = TrainerSpec::classifier(2, 2, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let n = 1000;
        let features: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        labels.shuffle(&mut rng);
        let data = LabeledDataset::new(2, features, Labels::Classes(labels)).unwrap();
        let w = random_params(6, 1);
        let acc = evaluate(&spec, &w, &data).unwrap().accuracy.unwrap();
        assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
    }

    #[test]
    fn logits_backward_matches_finite_differences() {
        let spec = TrainerSpec::classifier(3, 2, 0.1);
        let data = random_classification(4, 3, 2, 3);
        let p = random_params(8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dl: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        // f(w) = Σ dl · logits(w)
        let f = |w: &ParameterVector| {
            let mut out = [0.0; 2];
            let mut s = 0.0;
            for j in 0..4 {
                spec.forward_row(w.as_slice(), data.row(j), &mut out);
                s += dl[2 * j] * out[0] + dl[2 * j + 1] * out[1];
            }
            s
        };
        let g = spec.logits_backward(&p, &data, &dl).unwrap();
        assert_grad_close(&g, &central_difference(f, &p, 1e-6));
    }
}
