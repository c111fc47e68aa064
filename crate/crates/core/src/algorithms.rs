//! Federated update rules: case-weighted averaging, the proximal local
//! objective, and gossip contrastive mutual learning (a signed KL term
//! between a local and an incoming model, then a validation-weighted merge).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{axpy, ensure_same_dim, l2_distance_squared, weighted_mean, ParamError, ParameterVector};
use crate::training::{argmax, LabeledDataset, LocalTrainer, TrainError};

/// Per-sample cap on the magnitude of the contrastive KL term.
pub const DEFAULT_KL_CAP: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_MU: f64 = 0.01;
/// Lower clamp applied to reference probabilities inside the KL.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlgoError {
    #[error("no active site submitted an update this round")]
    NoUpdates,
    #[error("mu must be nonnegative, got {0}")]
    NegativeMu(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    LambdaOutOfRange(f64),
    #[error("distribution length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("prediction batches are not aligned: {0}")]
    Misaligned(&'static str),
    #[error("invalid prediction batch: {0}")]
    InvalidBatch(String),
    #[error("both validation losses are zero")]
    ZeroValidationLosses,
    #[error("invalid validation loss {0} for {1} weighting")]
    InvalidValidationLoss(f64, &'static str),
    #[error("site {0} reported case_count 0")]
    ZeroCaseCount(u64),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Training(#[from] TrainError),
}

/// A local model submitted for aggregation, weighted by its case count.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteUpdate {
    pub site_id: u64,
    pub case_count: u64,
    pub params: ParameterVector,
}

/// Case-count weighted average of the submitted local models.
///
/// The total case count is taken over the updates passed in, so partial
/// participation renormalizes over the sites that actually reported.
pub fn fedavg_aggregate(updates: &[SiteUpdate]) -> Result<ParameterVector, AlgoError> {
    if updates.is_empty() {
        return Err(AlgoError::NoUpdates);
    }
    if let Some(u) = updates.iter().find(|u| u.case_count == 0) {
        return Err(AlgoError::ZeroCaseCount(u.site_id));
    }
    let entries: Vec<_> = updates.iter().map(|u| (&u.params, u.case_count as f64)).collect();
    Ok(weighted_mean(&entries)?)
}

/// Adds `(mu/2)‖w_local − w_global‖²` to a loss and `mu (w_local − w_global)`
/// to its gradient. `mu == 0` returns the inputs untouched.
pub fn fedprox_objective(
    base_loss: f64,
    base_grad: &ParameterVector,
    w_local: &ParameterVector,
    w_global: &ParameterVector,
    mu: f64,
) -> Result<(f64, ParameterVector), AlgoError> {
    if !(mu >= 0.0) {
        return Err(AlgoError::NegativeMu(mu));
    }
    ensure_same_dim(w_local, w_global)?;
    ensure_same_dim(base_grad, w_local)?;
    if mu == 0.0 {
        return Ok((base_loss, base_grad.clone()));
    }
    let diff = w_local.sub(w_global)?;
    let loss = base_loss + 0.5 * mu * l2_distance_squared(w_local, w_global)?;
    Ok((loss, axpy(mu, &diff, base_grad)?))
}

/// `Σ_c p_c log(p_c / q_c)` with `0·log 0 = 0` and `q` floored at 1e-12.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, AlgoError> {
    if p.len() != q.len() {
        return Err(AlgoError::LengthMismatch(p.len(), q.len()));
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pc, _)| **pc > 0.0)
        .map(|(pc, qc)| pc * (pc / qc.max(PROB_FLOOR)).ln())
        .sum::<f64>()
        .max(0.0)
}

/// Per-sample class distributions with labels and an in-region flag.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch {
    class_count: usize,
    probs: Vec<f64>,
    labels: Vec<usize>,
    region_mask: Vec<bool>,
}

impl PredictionBatch {
    pub fn new(class_count: usize, probs: Vec<f64>, labels: Vec<usize>, region_mask: Vec<bool>) -> Result<Self, AlgoError> {
        if class_count == 0 || probs.len() != labels.len() * class_count || labels.len() != region_mask.len() {
            return Err(AlgoError::InvalidBatch(format!(
                "{} probs, {} labels, {} mask entries for {class_count} classes",
                probs.len(),
                labels.len(),
                region_mask.len()
            )));
        }
        for (j, row) in probs.chunks(class_count).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(AlgoError::InvalidBatch(format!("row {j} is not a distribution")));
            }
        }
        if let Some(y) = labels.iter().find(|&&y| y >= class_count) {
            return Err(AlgoError::InvalidBatch(format!("label {y} outside [0, {class_count})")));
        }
        Ok(Self { class_count, probs, labels, region_mask })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.probs[j * self.class_count..(j + 1) * self.class_count]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn region_mask(&self) -> &[bool] {
        &self.region_mask
    }

    pub fn with_region_mask(mut self, mask: Vec<bool>) -> Result<Self, AlgoError> {
        if mask.len() != self.labels.len() {
            return Err(AlgoError::InvalidBatch("region mask length".into()));
        }
        self.region_mask = mask;
        Ok(self)
    }

    fn check_aligned(&self, other: &Self) -> Result<(), AlgoError> {
        if self.class_count != other.class_count {
            return Err(AlgoError::Misaligned("class count"));
        }
        if self.labels != other.labels {
            return Err(AlgoError::Misaligned("labels"));
        }
        if self.region_mask != other.region_mask {
            return Err(AlgoError::Misaligned("region mask"));
        }
        Ok(())
    }
}

/// Signed, capped KL of the learning predictions `p` from the reference `q`.
///
/// Over in-region samples: mean of `s_j · min(KL(p_j‖q_j), cap)` with
/// `s_j = +1` where the reference argmax equals the label, else `−1`.
pub fn contrastive_kl(p: &PredictionBatch, q: &PredictionBatch, kl_cap: f64) -> Result<f64, AlgoError> {
    Ok(contrastive_kl_terms(p, q, kl_cap, false)?.0)
}

/// Contrastive KL plus its gradient with respect to the learning model's
/// logits (row-major `n × C`). The reference is held fixed.
pub fn contrastive_kl_with_logit_grad(
    p: &PredictionBatch,
    q: &PredictionBatch,
    kl_cap: f64,
) -> Result<(f64, Vec<f64>), AlgoError> {
    contrastive_kl_terms(p, q, kl_cap, true)
}

fn contrastive_kl_terms(
    p: &PredictionBatch,
    q: &PredictionBatch,
    kl_cap: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>), AlgoError> {
    p.check_aligned(q)?;
    let c = p.class_count;
    let region = p.region_mask.iter().filter(|m| **m).count();
    let mut grad = if want_grad { vec![0.0; p.probs.len()] } else { Vec::new() };
    if region == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / region as f64;
    let mut total = 0.0;
    for j in (0..p.len()).filter(|&j| p.region_mask[j]) {
        let (pj, qj) = (p.row(j), q.row(j));
        let sign = if argmax(qj) == p.labels[j] { 1.0 } else { -1.0 };
        let kl = kl_unchecked(pj, qj);
        if kl > kl_cap {
            total += sign * kl_cap;
            continue;
        }
        total += sign * kl;
        if want_grad {
            // d KL / d z_k = p_k (log(p_k / q_k) − KL) through the softmax
            for k in 0..c {
                if pj[k] > 0.0 {
                    grad[j * c + k] = sign * inv * pj[k] * ((pj[k] / qj[k].max(PROB_FLOOR)).ln() - kl);
                }
            }
        }
    }
    Ok((total * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcmlConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub kl_cap: f64,
}

impl DcmlConfig {
    fn validate(&self) -> Result<(), AlgoError> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(AlgoError::LambdaOutOfRange(self.lambda));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(TrainError::InvalidLearningRate(self.learning_rate).into());
        }
        Ok(())
    }
}

/// `(1 − λ) F(w_learn) + λ CKL(P_learn ‖ P_ref)` on `data`, with its
/// gradient in `w_learn`. `λ = 0` returns the plain loss and gradient.
pub fn dcml_objective<T: LocalTrainer + ?Sized>(
    trainer: &T,
    w_learn: &ParameterVector,
    w_ref: &ParameterVector,
    data: &LabeledDataset,
    region_mask: Option<&[bool]>,
    lambda: f64,
    kl_cap: f64,
) -> Result<(f64, ParameterVector), AlgoError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(AlgoError::LambdaOutOfRange(lambda));
    }
    let (loss, grad) = trainer.loss_and_grad(w_learn, data)?;
    if lambda == 0.0 {
        return Ok((loss, grad));
    }
    let mut p = trainer.predict_proba(w_learn, data)?;
    let mut q = trainer.predict_proba(w_ref, data)?;
    if let Some(mask) = region_mask {
        p = p.with_region_mask(mask.to_vec())?;
        q = q.with_region_mask(mask.to_vec())?;
    }
    let (ckl, dlogits) = contrastive_kl_with_logit_grad(&p, &q, kl_cap)?;
    let ckl_grad = trainer.logits_backward(w_learn, data, &dlogits)?;
    let composite = (1.0 - lambda) * loss + lambda * ckl;
    Ok((composite, axpy(lambda, &ckl_grad, &grad.scale(1.0 - lambda))?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcmlOutcome {
    pub receiver: ParameterVector,
    pub sender: ParameterVector,
    pub receiver_objective: f64,
    pub sender_objective: f64,
}

/// One joint mutual-learning step on the receiver's data: each model
/// descends its composite objective with the other model as reference.
pub fn dcml_step<T: LocalTrainer + ?Sized>(
    w_r: &ParameterVector,
    w_s: &ParameterVector,
    local_batch: &LabeledDataset,
    config: &DcmlConfig,
    trainer: &T,
    region_mask: Option<&[bool]>,
) -> Result<DcmlOutcome, AlgoError> {
    config.validate()?;
    ensure_same_dim(w_r, w_s)?;
    let (fr, gr) = dcml_objective(trainer, w_r, w_s, local_batch, region_mask, config.lambda, config.kl_cap)?;
    let (fs, gs) = dcml_objective(trainer, w_s, w_r, local_batch, region_mask, config.lambda, config.kl_cap)?;
    Ok(DcmlOutcome {
        receiver: axpy(-config.learning_rate, &gr, w_r)?,
        sender: axpy(-config.learning_rate, &gs, w_s)?,
        receiver_objective: fr,
        sender_objective: fs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    /// Weights proportional to the raw validation losses.
    #[default]
    Paper,
    /// Weights proportional to the inverse validation losses.
    Inverse,
}

/// Validation-loss weighted merge of the receiver and sender models.
pub fn gcml_merge(
    w_r: &ParameterVector,
    w_s: &ParameterVector,
    v_r: f64,
    v_s: f64,
    mode: MergeMode,
) -> Result<ParameterVector, AlgoError> {
    ensure_same_dim(w_r, w_s)?;
    let (a, b) = match mode {
        MergeMode::Paper => {
            for v in [v_r, v_s] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(AlgoError::InvalidValidationLoss(v, "paper"));
                }
            }
            if v_r + v_s == 0.0 {
                return Err(AlgoError::ZeroValidationLosses);
            }
            (v_r, v_s)
        }
        MergeMode::Inverse => {
            for v in [v_r, v_s] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(AlgoError::InvalidValidationLoss(v, "inverse"));
                }
            }
            (1.0 / v_r, 1.0 / v_s)
        }
    };
    Ok(weighted_mean(&[(w_r, a), (w_s, b)])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{Labels, TrainerSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParameterVector {
        ParameterVector::new(v.to_vec())
    }

    fn upd(id: u64, m: u64, v: &[f64]) -> SiteUpdate {
        SiteUpdate { site_id: id, case_count: m, params: pv(v) }
    }

    #[test]
    fn fedavg_examples() {
        let v = [0.25, -1.5, 3.0];
        let same: Vec<_> = (0..8).map(|i| upd(i, 25, &v)).collect();
        assert!(fedavg_aggregate(&same).unwrap().bit_eq(&pv(&v)));
        let skew = fedavg_aggregate(&[upd(0, 48, &[1.0]), upd(1, 12, &[5.0])]).unwrap();
        assert!((skew[0] - 1.8).abs() < 1e-15);
        assert!(fedavg_aggregate(&[upd(3, 7, &v)]).unwrap().bit_eq(&pv(&v)));
        assert_eq!(fedavg_aggregate(&[]), Err(AlgoError::NoUpdates));
        assert_eq!(fedavg_aggregate(&[upd(4, 0, &v)]), Err(AlgoError::ZeroCaseCount(4)));
    }

    #[test]
    fn fedprox_examples() {
        let g = pv(&[0.3, -0.2]);
        let (wl, wg) = (pv(&[1.0, 2.0]), pv(&[0.0, 5.0]));
        let (l, out) = fedprox_objective(1.25, &g, &wl, &wg, 0.0).unwrap();
        assert_eq!(l.to_bits(), 1.25f64.to_bits());
        assert!(out.bit_eq(&g));
        let (l, out) = fedprox_objective(1.25, &g, &wl, &wl, 0.7).unwrap();
        assert_eq!(l, 1.25);
        assert!(out.bit_eq(&g));
        let (l, out) = fedprox_objective(0.0, &pv(&[0.0]), &pv(&[3.0]), &pv(&[1.0]), 2.0).unwrap();
        assert_eq!(l, 4.0);
        assert_eq!(out.as_slice(), &[4.0]);
        assert_eq!(
            fedprox_objective(0.0, &g, &wl, &wg, -1.0),
            Err(AlgoError::NegativeMu(-1.0))
        );
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
        // zero reference probability is floored, not infinite
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap().is_finite());
    }

    fn batch(probs: &[[f64; 2]], labels: &[usize]) -> PredictionBatch {
        PredictionBatch::new(
            2,
            probs.iter().flatten().copied().collect(),
            labels.to_vec(),
            vec![true; labels.len()],
        )
        .unwrap()
    }

    #[test]
    fn contrastive_kl_examples() {
        let q = batch(&[[0.9, 0.1], [0.3, 0.7]], &[0, 0]);
        assert_eq!(contrastive_kl(&q, &q, DEFAULT_KL_CAP).unwrap(), 0.0);

        // reference correct on sample 0, wrong on sample 1
        let p = batch(&[[0.6, 0.4], [0.5, 0.5]], &[0, 0]);
        let k1 = kl_divergence(&[0.6, 0.4], &[0.9, 0.1]).unwrap();
        let k2 = kl_divergence(&[0.5, 0.5], &[0.3, 0.7]).unwrap();
        let got = contrastive_kl(&p, &q, DEFAULT_KL_CAP).unwrap();
        assert!((got - (k1 - k2) / 2.0).abs() < 1e-15);

        // all reference predictions correct: plain mean KL
        let q_ok = batch(&[[0.9, 0.1], [0.3, 0.7]], &[0, 1]);
        let p_ok = batch(&[[0.6, 0.4], [0.5, 0.5]], &[0, 1]);
        let mean = (k1 + k2) / 2.0;
        assert!((contrastive_kl(&p_ok, &q_ok, DEFAULT_KL_CAP).unwrap() - mean).abs() < 1e-15);

        // empty region
        let p_none = p.clone().with_region_mask(vec![false, false]).unwrap();
        let q_none = q.clone().with_region_mask(vec![false, false]).unwrap();
        assert_eq!(contrastive_kl(&p_none, &q_none, DEFAULT_KL_CAP).unwrap(), 0.0);

        assert!(matches!(contrastive_kl(&p_ok, &q, 10.0), Err(AlgoError::Misaligned("labels"))));
    }

    #[test]
    fn contrastive_kl_is_bounded_by_cap() {
        let p = batch(&[[1.0 - 1e-15, 1e-15]], &[1]);
        let q = batch(&[[1e-14, 1.0 - 1e-14]], &[1]);
        let v = contrastive_kl(&p, &q, 2.0).unwrap();
        assert_eq!(v, 2.0);
        let q_wrong = batch(&[[1e-14, 1.0 - 1e-14]], &[0]);
        let p_wrong = batch(&[[1.0 - 1e-15, 1e-15]], &[0]);
        assert_eq!(contrastive_kl(&p_wrong, &q_wrong, 2.0).unwrap(), -2.0);
    }

    #[test]
    fn prediction_batch_validation() {
        assert!(PredictionBatch::new(2, vec![0.5, 0.6], vec![0], vec![true]).is_err());
        assert!(PredictionBatch::new(2, vec![0.5, 0.5], vec![2], vec![true]).is_err());
        assert!(PredictionBatch::new(2, vec![0.5, 0.5], vec![0], vec![]).is_err());
    }

    fn toy_problem(seed: u64) -> (TrainerSpec, LabeledDataset, ParameterVector, ParameterVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = TrainerSpec::classifier(3, 2, 0.1);
        let features = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = LabeledDataset::new(3, features, Labels::Classes(vec![0, 1, 1, 0])).unwrap();
        let a = ParameterVector::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        let b = ParameterVector::new((0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
        (spec, data, a, b)
    }

    #[test]
    fn dcml_lambda_zero_is_plain_step() {
        let (spec, data, wr, ws) = toy_problem(1);
        let cfg = DcmlConfig { lambda: 0.0, learning_rate: 0.1, kl_cap: DEFAULT_KL_CAP };
        let out = dcml_step(&wr, &ws, &data, &cfg, &spec, None).unwrap();
        let plain_r = crate::training::train_rounds(&spec, &wr, &data, 0.0, None, 0).unwrap();
        let plain_s = crate::training::train_rounds(&spec, &ws, &data, 0.0, None, 0).unwrap();
        assert!(out.receiver.bit_eq(&plain_r));
        assert!(out.sender.bit_eq(&plain_s));
    }

    #[test]
    fn dcml_identical_models_take_identical_steps() {
        let (spec, data, w, _) = toy_problem(2);
        let cfg = DcmlConfig { lambda: 0.5, learning_rate: 0.1, kl_cap: DEFAULT_KL_CAP };
        let out = dcml_step(&w, &w, &data, &cfg, &spec, None).unwrap();
        assert!(out.receiver.bit_eq(&out.sender));
        let (plain, _) = spec.loss_and_grad(&w, &data).unwrap();
        assert!((out.receiver_objective - 0.5 * plain).abs() < 1e-15);
    }

    #[test]
    fn dcml_rejects_bad_lambda() {
        let (spec, data, wr, ws) = toy_problem(3);
        let cfg = DcmlConfig { lambda: 1.5, learning_rate: 0.1, kl_cap: DEFAULT_KL_CAP };
        assert_eq!(
            dcml_step(&wr, &ws, &data, &cfg, &spec, None),
            Err(AlgoError::LambdaOutOfRange(1.5))
        );
    }

    #[test]
    fn merge_examples() {
        let (a, b) = (pv(&[0.0, 2.0]), pv(&[4.0, -2.0]));
        for mode in [MergeMode::Paper, MergeMode::Inverse] {
            assert_eq!(gcml_merge(&a, &b, 0.7, 0.7, mode).unwrap().as_slice(), &[2.0, 0.0]);
        }
        assert_eq!(gcml_merge(&pv(&[0.0]), &pv(&[4.0]), 1.0, 3.0, MergeMode::Paper).unwrap().as_slice(), &[3.0]);
        assert_eq!(gcml_merge(&pv(&[0.0]), &pv(&[4.0]), 1.0, 3.0, MergeMode::Inverse).unwrap().as_slice(), &[1.0]);
        let wr = pv(&[0.1, 0.7, -3.3]);
        let ws = pv(&[1.0, 1.0, 1.0]);
        assert!(gcml_merge(&wr, &ws, 3.0, 0.0, MergeMode::Paper).unwrap().bit_eq(&wr));
        assert_eq!(gcml_merge(&a, &b, 0.0, 0.0, MergeMode::Paper), Err(AlgoError::ZeroValidationLosses));
        assert!(gcml_merge(&a, &b, 0.0, 1.0, MergeMode::Inverse).is_err());
        assert!(gcml_merge(&a, &b, -1.0, 1.0, MergeMode::Paper).is_err());
    }
}
