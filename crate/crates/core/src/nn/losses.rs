use std::sync::Arc;

use super::graph::{softmax_axis0, Graph, Var};
use super::tensor::Tensor;

impl Graph<'_> {
    /// Mean softmax cross-entropy over the positions that carry a target.
    ///
    /// `logits: [K, P...]`; `targets` has one entry per trailing position.
    /// Returns a scalar, zero when no position has a target.
    pub fn cross_entropy0(&mut self, logits: Var, targets: Arc<Vec<Option<usize>>>) -> Var {
        let t = self.value(logits);
        let k = t.shape()[0];
        let plane = t.len() / k.max(1);
        assert_eq!(targets.len(), plane, "cross_entropy0: one target per position");
        let probs = softmax_axis0(t.data(), k, plane);
        let n = targets.iter().filter(|t| t.is_some()).count();
        let mut loss = 0.0;
        for (p, tg) in targets.iter().enumerate() {
            if let Some(c) = *tg {
                assert!(c < k, "cross_entropy0: target {c} out of {k} classes");
                loss -= probs[c * plane + p].max(1e-300).ln();
            }
        }
        let norm = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        self.custom_op(Tensor::scalar(loss * norm), &[logits], move |g, _, grads| {
            let gv = g.data()[0] * norm;
            if let Some(s) = grads.slot(logits) {
                for (p, tg) in targets.iter().enumerate() {
                    if let Some(c) = *tg {
                        for j in 0..k {
                            let y = if j == c { 1.0 } else { 0.0 };
                            s[j * plane + p] += gv * (probs[j * plane + p] - y);
                        }
                    }
                }
            }
        })
    }
}
