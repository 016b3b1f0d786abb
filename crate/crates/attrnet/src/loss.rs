//! Batch-weighted multi-label cross-entropy.
//!
//! Class weights are recomputed from the labels of every batch:
//! `w_k = 1 - mean_j(y_kj)`, so a class saturating a batch gets weight 0 and
//! an absent class gets weight 1. The loss itself is the full two-term
//! binary cross-entropy per class, scaled by `w_k` and averaged over the
//! batch, computed in the fused sigmoid+log form so large logits never
//! overflow. Weights are treated as constants during backpropagation; they
//! depend on labels only.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One loss weight per class, each in [0, 1] for labels in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<E: Scalar = f32>(Vec<E>);

impl<E: Scalar> WeightVector<E> {
    pub fn new(weights: Vec<E>) -> Self {
        WeightVector(weights)
    }

    pub fn as_slice(&self) -> &[E] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Mapped training labels for one batch: `b x n` values in {0, 0.5, 1}.
#[derive(Debug, Clone)]
pub struct LabelBatch<E: Scalar = f32> {
    values: Tensor<E>,
}

impl<E: Scalar> LabelBatch<E> {
    pub fn new(values: Tensor<E>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "label batch must be b x n, got {:?}",
                values.shape()
            )));
        }
        for &v in values.data() {
            let v = v.to_f64();
            if v != 0.0 && v != 0.5 && v != 1.0 {
                return Err(Error::Parameter(format!(
                    "label values must be 0, 0.5 or 1, got {v}"
                )));
            }
        }
        Ok(LabelBatch { values })
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor<E> {
        &self.values
    }
}

/// Per-batch class weights: `w_k = 1 - (1/B) sum_j y_kj`.
pub fn batch_class_weights<E: Scalar>(labels: &LabelBatch<E>) -> Result<WeightVector<E>> {
    let b = labels.batch_size();
    let n = labels.num_classes();
    if b == 0 {
        return Err(Error::Parameter("batch_class_weights needs B >= 1".into()));
    }
    let batch = E::from_f64(b as f64);
    let data = labels.values().data();
    let mut w = vec![E::ZERO; n];
    for (k, wk) in w.iter_mut().enumerate() {
        let mut sum = E::ZERO;
        for j in 0..b {
            sum += data[j * n + k];
        }
        *wk = E::ONE - sum / batch;
    }
    Ok(WeightVector(w))
}

/// Weighted cross-entropy of `b x n` logits against mapped labels, plus the
/// gradient with respect to the logits (fused stable form). The scalar loss
/// is the mean over the batch of the per-sample class sums.
pub fn weighted_ce_loss<E: Scalar>(
    logits: &Tensor<E>,
    labels: &LabelBatch<E>,
    weights: &WeightVector<E>,
) -> Result<(E, Tensor<E>)> {
    let (b, n) = (labels.batch_size(), labels.num_classes());
    if logits.shape() != [b, n] {
        return Err(Error::Dimension(format!(
            "logits shape {:?} does not match labels {b}x{n}",
            logits.shape()
        )));
    }
    if weights.len() != n {
        return Err(Error::Dimension(format!(
            "weight vector has {} entries for {n} classes",
            weights.len()
        )));
    }
    if !logits.all_finite() {
        return Err(Error::Numeric("weighted_ce_loss logits not finite".into()));
    }
    let y = labels.values().data();
    let w = weights.as_slice();
    let loss = fused_bce_forward(logits.data(), y, w, b, n);
    let grad = fused_bce_grad_logits(logits.data(), y, w, b, n);
    Ok((loss, Tensor::new(vec![b, n], grad)?))
}

/// Per-element stable binary cross-entropy on a logit:
/// `y*(-log s(o)) + (1-y)*(-log(1-s(o))) = max(o,0) - o*y + log(1+exp(-|o|))`.
fn bce_term<E: Scalar>(logit: E, y: E) -> E {
    logit.maximum(E::ZERO) - logit * y + (E::ONE + (-logit.abs()).exp()).ln()
}

pub(crate) fn fused_bce_forward<E: Scalar>(
    logits: &[E],
    targets: &[E],
    weights: &[E],
    b: usize,
    n: usize,
) -> E {
    let mut total = E::ZERO;
    for j in 0..b {
        for k in 0..n {
            let i = j * n + k;
            total += weights[k] * bce_term(logits[i], targets[i]);
        }
    }
    total * E::from_f64(1.0 / b as f64)
}

/// d(loss)/d(logit_kj) = w_k (sigma(o_kj) - y_kj) / B.
pub(crate) fn fused_bce_grad_logits<E: Scalar>(
    logits: &[E],
    targets: &[E],
    weights: &[E],
    b: usize,
    n: usize,
) -> Vec<E> {
    let inv_b = E::from_f64(1.0 / b as f64);
    let mut grad = vec![E::ZERO; b * n];
    for j in 0..b {
        for k in 0..n {
            let i = j * n + k;
            let s = crate::tensor::sigmoid_scalar(logits[i]);
            grad[i] = weights[k] * (s - targets[i]) * inv_b;
        }
    }
    grad
}
