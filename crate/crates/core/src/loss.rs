//! Batch-weighted cross-entropy.

use alloc::vec::Vec;

use crate::math;
use crate::records::{MedicationStatus, STATUS_COUNT};

/// Per-class weights inversely proportional to classwise sample counts in
/// the batch: for present classes `w_c = n / (C_present · n_c)`, absent
/// classes get zero. The count-weighted mean of present-class weights is 1,
/// so a balanced batch yields unit weights.
pub fn class_weights(labels: &[MedicationStatus]) -> [f64; STATUS_COUNT] {
    let mut counts = [0usize; STATUS_COUNT];
    for l in labels {
        counts[l.index()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let n = labels.len();
    let mut w = [0.0; STATUS_COUNT];
    if present == 0 {
        return w;
    }
    for c in 0..STATUS_COUNT {
        if counts[c] > 0 {
            w[c] = n as f64 / (present as f64 * counts[c] as f64);
        }
    }
    w
}

/// Log-softmax by the log-sum-exp trick.
fn log_softmax(logits: &[f64; STATUS_COUNT]) -> [f64; STATUS_COUNT] {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for &l in logits {
        z += math::exp(l - max);
    }
    let log_z = math::ln(z) + max;
    core::array::from_fn(|c| logits[c] - log_z)
}

pub fn softmax(logits: &[f64; STATUS_COUNT]) -> [f64; STATUS_COUNT] {
    let ls = log_softmax(logits);
    core::array::from_fn(|c| math::exp(ls[c]))
}

/// `−(1/N) Σ_i w_{y_i} · log softmax(logits_i)[y_i]`.
pub fn weighted_cross_entropy(
    logits: &[[f64; STATUS_COUNT]],
    labels: &[MedicationStatus],
    weights: &[f64; STATUS_COUNT],
) -> f64 {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len();
    let mut loss = 0.0;
    for (l, y) in logits.iter().zip(labels.iter()) {
        loss -= weights[y.index()] * log_softmax(l)[y.index()];
    }
    loss / n as f64
}

/// Loss plus its gradient with respect to each sample's logits:
/// `(w_{y_i}/N) · (softmax(logits_i) − onehot(y_i))`.
pub fn weighted_cross_entropy_grad(
    logits: &[[f64; STATUS_COUNT]],
    labels: &[MedicationStatus],
    weights: &[f64; STATUS_COUNT],
) -> (f64, Vec<[f64; STATUS_COUNT]>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for (l, y) in logits.iter().zip(labels.iter()) {
        let ls = log_softmax(l);
        let w = weights[y.index()];
        loss -= w * ls[y.index()];
        let scale = w / n as f64;
        let mut g: [f64; STATUS_COUNT] = core::array::from_fn(|c| scale * math::exp(ls[c]));
        g[y.index()] -= scale;
        grads.push(g);
    }
    (loss / n as f64, grads)
}
