//! Fused classification losses.

use super::elementwise::{sigmoid, softplus};
use super::nn::softmax_in_place;
use crate::{Tensor, Var};

/// Per-element sigmoid focal loss and its derivative w.r.t. the logit.
///
/// `target` is 0 or 1.
pub fn focal_term(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    // log p and log(1 - p) through softplus for stability
    let log_p = -softplus(-logit);
    let log_1mp = -softplus(logit);
    if target > 0.5 {
        let w = (1.0 - p).powf(gamma);
        let loss = -alpha * w * log_p;
        let grad = alpha * w * (gamma * p * log_p - (1.0 - p));
        (loss, grad)
    } else {
        let w = p.powf(gamma);
        let loss = -(1.0 - alpha) * w * log_1mp;
        let grad = -(1.0 - alpha) * w * (gamma * (1.0 - p) * log_1mp - p);
        (loss, grad)
    }
}

impl<'t> Var<'t> {
    /// Summed sigmoid focal loss against a 0/1 target tensor of the same shape.
    pub fn sigmoid_focal_loss(self, targets: &Tensor, alpha: f64, gamma: f64) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.shape(), targets.shape(), "focal target shape");
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(x.numel());
        for (&l, &t) in x.data().iter().zip(targets.data()) {
            let (v, d) = focal_term(l, t, alpha, gamma);
            total += v;
            grad.push(d);
        }
        let px = self.node();
        let shape = x.shape().to_vec();
        self.tape.custom(
            &[self],
            Tensor::scalar(total),
            Box::new(move |g, sink| {
                let s = g.item();
                let data = grad.iter().map(|d| d * s).collect();
                sink.accumulate(px, Tensor::new(shape.clone(), data));
            }),
        )
    }

    /// Summed softmax cross-entropy over rows; `labels[r]` indexes the column.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        assert_eq!(labels.len(), rows, "one label per row");
        let mut probs = (*x).clone();
        let mut total = 0.0;
        for (r, row) in probs.data_mut().chunks_mut(cols).enumerate() {
            softmax_in_place(row);
            assert!(labels[r] < cols, "label out of range");
            total -= row[labels[r]].max(f64::MIN_POSITIVE).ln();
        }
        let px = self.node();
        let labels = labels.to_vec();
        self.tape.custom(
            &[self],
            Tensor::scalar(total),
            Box::new(move |g, sink| {
                let s = g.item();
                let mut d = probs.clone();
                for (r, row) in d.data_mut().chunks_mut(cols).enumerate() {
                    row[labels[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                sink.accumulate(px, d);
            }),
        )
    }
}
