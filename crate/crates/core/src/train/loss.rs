//! Softmax cross-entropy over logit rows with an ignore label.

use crate::tensor::Tensor3;

/// Target value for rows that carry no loss.
pub const IGNORE_INDEX: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    /// Mean over scored rows (0 when none are scored).
    pub loss: f64,
    pub grad: Tensor3,
    pub correct: usize,
    pub scored: usize,
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// `targets` holds one label per `(batch, time)` logit row.
pub fn softmax_cross_entropy(logits: &Tensor3, targets: &[i64]) -> LossOutput {
    let k = logits.chan;
    assert_eq!(targets.len(), logits.rows(), "one target per logit row");
    let mut grad = Tensor3::zeros(logits.batch, logits.time, k);
    let scored = targets.iter().filter(|t| **t != IGNORE_INDEX).count();
    let mut total = 0.0;
    let mut correct = 0;
    for ((row, g), &t) in logits.data.chunks(k).zip(grad.data.chunks_mut(k)).zip(targets) {
        if t == IGNORE_INDEX {
            continue;
        }
        let t = t as usize;
        assert!(t < k, "target {t} out of range for {k} classes");
        let lp = log_softmax(row);
        total -= lp[t];
        if argmax(row) == t {
            correct += 1;
        }
        let scale = 1.0 / scored as f64;
        for (j, (gv, l)) in g.iter_mut().zip(&lp).enumerate() {
            *gv = scale * (l.exp() - if j == t { 1.0 } else { 0.0 });
        }
    }
    LossOutput {
        loss: if scored == 0 { 0.0 } else { total / scored as f64 },
        grad,
        correct,
        scored,
    }
}
