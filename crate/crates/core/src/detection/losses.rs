use serde::{Deserialize, Serialize};

use super::anchors::BOX_CODE_SIZE;
use super::head::HeadOutput;
use super::targets::{Label, Targets};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub reg_weight: f64,
    pub dir_weight: f64,
    pub depth_weight: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            reg_weight: 2.0,
            dir_weight: 0.2,
            depth_weight: 0.05,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLosses {
    pub cls: Var,
    pub reg: Var,
    pub dir: Var,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid focal loss and its derivative w.r.t. the logit.
fn focal(x: f64, positive: bool, alpha: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if positive {
        let logp = -softplus(-x);
        let q = 1.0 - p;
        (-alpha * q.powf(gamma) * logp, alpha * q.powf(gamma) * (gamma * p * logp - q))
    } else {
        let log1mp = -softplus(x);
        (-(1.0 - alpha) * p.powf(gamma) * log1mp, (1.0 - alpha) * p.powf(gamma) * (p - gamma * (1.0 - p) * log1mp))
    }
}

fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Classification, regression and direction losses, each normalized by the
/// positive count (at least 1). Regression uses `sin(pred - target)` for the
/// yaw residual so headings that differ by `pi` cost nothing; the direction
/// branch separates them.
pub fn compute_losses(g: &mut Graph, out: &HeadOutput, targets: &Targets, cfg: &LossConfig) -> DetectionLosses {
    let norm = 1.0 / targets.num_positives().max(1) as f64;
    let shape = g.shape(out.cls).to_vec();
    let a = shape[0];
    let ncell = g.value(out.cls).len() / a;
    assert_eq!(targets.labels.len(), a * ncell, "targets do not match head layout");

    // Classification.
    let (alpha, gamma) = (cfg.focal_alpha, cfg.focal_gamma);
    let xs = g.value(out.cls).data();
    let mut total = 0.0;
    let mut dcls = vec![0.0; xs.len()];
    for (i, l) in targets.labels.iter().enumerate() {
        if *l == Label::Ignore {
            continue;
        }
        let k = (i % a) * ncell + i / a;
        let (v, d) = focal(xs[k], *l == Label::Positive, alpha, gamma);
        total += v;
        dcls[k] = d * norm;
    }
    let cls_var = out.cls;
    let cls = g.custom_op(Tensor::scalar(total * norm), &[cls_var], move |gr, _, grads| {
        let gv = gr.data()[0];
        if let Some(s) = grads.slot(cls_var) {
            for (s, d) in s.iter_mut().zip(&dcls) {
                *s += gv * d;
            }
        }
    });

    // Regression.
    let beta = cfg.smooth_l1_beta;
    let bs = g.value(out.boxes).data();
    let mut total = 0.0;
    let mut dreg: Vec<(usize, f64)> = Vec::with_capacity(targets.num_positives() * BOX_CODE_SIZE);
    for (i, t, _) in &targets.positives {
        let (cell, slot) = (i / a, i % a);
        for k in 0..BOX_CODE_SIZE {
            let idx = (slot * BOX_CODE_SIZE + k) * ncell + cell;
            let p = bs[idx];
            let (v, d) = if k == BOX_CODE_SIZE - 1 {
                let diff = (p - t[k]).sin();
                let (v, d) = smooth_l1(diff, beta);
                (v, d * (p - t[k]).cos())
            } else {
                smooth_l1(p - t[k], beta)
            };
            total += v;
            dreg.push((idx, d * norm));
        }
    }
    let box_var = out.boxes;
    let reg = g.custom_op(Tensor::scalar(total * norm), &[box_var], move |gr, _, grads| {
        let gv = gr.data()[0];
        if let Some(s) = grads.slot(box_var) {
            for &(idx, d) in &dreg {
                s[idx] += gv * d;
            }
        }
    });

    // Direction.
    let ds = g.value(out.dir).data();
    let mut total = 0.0;
    let mut ddir: Vec<(usize, f64)> = Vec::with_capacity(targets.num_positives() * 2);
    for (i, _, dt) in &targets.positives {
        let (cell, slot) = (i / a, i % a);
        let idx = [slot * 2 * ncell + cell, (slot * 2 + 1) * ncell + cell];
        let (z0, z1) = (ds[idx[0]], ds[idx[1]]);
        let m = z0.max(z1);
        let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
        let p = [(z0 - lse).exp(), (z1 - lse).exp()];
        total += lse - if *dt == 0 { z0 } else { z1 };
        for k in 0..2 {
            let y = if k == *dt { 1.0 } else { 0.0 };
            ddir.push((idx[k], (p[k] - y) * norm));
        }
    }
    let dir_var = out.dir;
    let dir = g.custom_op(Tensor::scalar(total * norm), &[dir_var], move |gr, _, grads| {
        let gv = gr.data()[0];
        if let Some(s) = grads.slot(dir_var) {
            for &(idx, d) in &ddir {
                s[idx] += gv * d;
            }
        }
    });
    DetectionLosses { cls, reg, dir }
}

impl DetectionLosses {
    /// Weighted detection total, plus the depth term when present.
    pub fn total(&self, g: &mut Graph, cfg: &LossConfig, depth: Option<Var>) -> Var {
        let mut terms = vec![(self.cls, cfg.cls_weight), (self.reg, cfg.reg_weight), (self.dir, cfg.dir_weight)];
        if let Some(d) = depth {
            terms.push((d, cfg.depth_weight));
        }
        g.linear_comb(&terms)
    }
}
