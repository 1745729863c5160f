//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op applied during one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar with respect to every node that requires it. Graphs are built per
//! forward pass and never shared between threads.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Tensor, &[Tensor], &mut Grads)>;

/// Gradient accumulators handed to backward closures.
pub struct Grads {
    slots: Vec<Option<Tensor>>,
    requires: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Mutable gradient buffer for `v`, or `None` when `v` does not need one.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let shape = &self.shapes[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    values: Vec<Tensor>,
    requires: Vec<bool>,
    backs: Vec<Option<BackFn>>,
    param_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
    param_vars: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.slots[v.0].as_ref()
    }

    /// Gradients of every parameter touched by the forward pass, in id order.
    pub fn params(&self) -> Vec<(ParamId, &Tensor)> {
        let mut out: Vec<(ParamId, &Tensor)> = self
            .param_vars
            .iter()
            .filter_map(|&(id, v)| self.slots[v.0].as_ref().map(|t| (id, t)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            values: Vec::new(),
            requires: Vec::new(),
            backs: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph without a parameter store (pure-input computations).
    pub fn standalone() -> Graph<'static> {
        Graph {
            params: None,
            values: Vec::new(),
            requires: Vec::new(),
            backs: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Inference mode: no backward closures are recorded.
    pub fn without_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.requires.push(false);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    /// Differentiable leaf (gradient available after `backward`).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.values.push(t);
        self.requires.push(self.grad_enabled);
        self.backs.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf bound to a stored parameter. Repeated calls with the same id
    /// return the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.params.expect("graph has no parameter store").get(id).clone();
        let v = self.leaf(t);
        self.param_vars.insert(id, v);
        v
    }

    /// Record a node computed outside the graph. `back` receives the output
    /// gradient and all node values and must add into the parents' slots.
    pub fn custom_op<F>(&mut self, value: Tensor, parents: &[Var], back: F) -> Var
    where
        F: Fn(&Tensor, &[Tensor], &mut Grads) + 'static,
    {
        let requires = self.grad_enabled && parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.backs.push(if requires { Some(Box::new(back)) } else { None });
        Var(self.values.len() - 1)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be a scalar");
        let n = self.values.len();
        let mut grads = Grads {
            slots: (0..n).map(|_| None).collect(),
            requires: self.requires.clone(),
            shapes: self.values.iter().map(|t| t.shape().to_vec()).collect(),
        };
        if self.requires[root.0] {
            grads.slots[root.0] = Some(Tensor::full(self.values[root.0].shape(), 1.0));
        }
        for i in (0..=root.0).rev() {
            let Some(back) = &self.backs[i] else { continue };
            let Some(g) = grads.slots[i].take() else { continue };
            back(&g, &self.values, &mut grads);
            grads.slots[i] = Some(g);
        }
        let mut param_vars: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&k, &v)| (k, v)).collect();
        param_vars.sort_by_key(|(id, _)| *id);
        Gradients { slots: grads.slots, param_vars }
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.custom_op(out, &[a, b], move |g, _, grads| {
            for v in [a, b] {
                if let Some(s) = grads.slot(v) {
                    for (s, g) in s.iter_mut().zip(g.data()) {
                        *s += g;
                    }
                }
            }
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.custom_op(out, &[a, b], move |g, vals, grads| {
            if let Some(s) = grads.slot(a) {
                for ((s, g), y) in s.iter_mut().zip(g.data()).zip(vals[b.0].data()) {
                    *s += g * y;
                }
            }
            if let Some(s) = grads.slot(b) {
                for ((s, g), x) in s.iter_mut().zip(g.data()).zip(vals[a.0].data()) {
                    *s += g * x;
                }
            }
        })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.custom_op(out, &[a], move |g, _, grads| {
            if let Some(s) = grads.slot(a) {
                for (s, g) in s.iter_mut().zip(g.data()) {
                    *s += g * k;
                }
            }
        })
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape(), "add_const: shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        self.custom_op(out, &[a], move |g, _, grads| {
            if let Some(s) = grads.slot(a) {
                for (s, g) in s.iter_mut().zip(g.data()) {
                    *s += g;
                }
            }
        })
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.shape(), c.shape(), "mul_const: shape mismatch");
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(ta.shape(), data);
        let c = c.clone();
        self.custom_op(out, &[a], move |g, _, grads| {
            if let Some(s) = grads.slot(a) {
                for ((s, g), k) in s.iter_mut().zip(g.data()).zip(c.data()) {
                    *s += g * k;
                }
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        self.custom_op(out, &[a], move |g, vals, grads| {
            if let Some(s) = grads.slot(a) {
                for ((s, g), x) in s.iter_mut().zip(g.data()).zip(vals[a.0].data()) {
                    if *x > 0.0 {
                        *s += g;
                    }
                }
            }
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.custom_op(out, &[a], move |g, _, grads| {
            if let Some(s) = grads.slot(a) {
                for (s, g) in s.iter_mut().zip(g.data()) {
                    *s += g;
                }
            }
        })
    }

    // ----- channel-axis ops (axis 0 of `[C, ...]`) -----------------------

    /// Add a per-channel bias `b: [C]` to `x: [C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        assert_eq!(self.value(b).len(), c, "bias width mismatch");
        let plane = tx.len() / c.max(1);
        let bias = self.value(b).data().to_vec();
        let mut out = tx.clone();
        for (k, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate().take(c) {
            for v in chunk {
                *v += bias[k];
            }
        }
        self.custom_op(out, &[x, b], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                for (s, g) in s.iter_mut().zip(g.data()) {
                    *s += g;
                }
            }
            if let Some(s) = grads.slot(b) {
                for (k, chunk) in g.data().chunks(plane.max(1)).enumerate().take(c) {
                    s[k] += chunk.iter().sum::<f64>();
                }
            }
        })
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut offsets = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], &tail[..], "concat0: trailing shape mismatch");
            offsets.push((p, data.len(), t.len()));
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_vec(&shape, data);
        self.custom_op(out, parts, move |g, _, grads| {
            for &(p, off, n) in &offsets {
                if let Some(s) = grads.slot(p) {
                    for (s, g) in s.iter_mut().zip(&g.data()[off..off + n]) {
                        *s += g;
                    }
                }
            }
        })
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        assert!(start + len <= t.shape()[0], "slice0: out of range");
        let inner = t.len() / t.shape()[0];
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let out = Tensor::from_vec(&shape, t.data()[start * inner..(start + len) * inner].to_vec());
        self.custom_op(out, &[x], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                for (s, g) in s[start * inner..(start + len) * inner].iter_mut().zip(g.data()) {
                    *s += g;
                }
            }
        })
    }

    /// Softmax over axis 0 independently at every trailing position.
    pub fn softmax0(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.shape()[0];
        let plane = tx.len() / c.max(1);
        let out = softmax_axis0(tx.data(), c, plane);
        let out = Tensor::from_vec(tx.shape(), out);
        let y = out.clone();
        self.custom_op(out, &[x], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                let (yd, gd) = (y.data(), g.data());
                for p in 0..plane {
                    let mut dot = 0.0;
                    for k in 0..c {
                        dot += yd[k * plane + p] * gd[k * plane + p];
                    }
                    for k in 0..c {
                        let i = k * plane + p;
                        s[i] += yd[i] * (gd[i] - dot);
                    }
                }
            }
        })
    }

    /// Scale every channel of `x: [C, P...]` by the matching entry of `w: [1, P...]`.
    pub fn mul_broadcast0(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        assert_eq!(tw.shape()[0], 1);
        assert_eq!(&tx.shape()[1..], &tw.shape()[1..], "mul_broadcast0: shape mismatch");
        let c = tx.shape()[0];
        let plane = tw.len();
        let mut out = tx.clone();
        for chunk in out.data_mut().chunks_mut(plane.max(1)).take(c) {
            for (v, k) in chunk.iter_mut().zip(tw.data()) {
                *v *= k;
            }
        }
        self.custom_op(out, &[x, w], move |g, vals, grads| {
            if let Some(s) = grads.slot(x) {
                let wd = vals[w.0].data();
                for (k, (sc, gc)) in s.chunks_mut(plane).zip(g.data().chunks(plane)).enumerate().take(c) {
                    let _ = k;
                    for ((s, g), w) in sc.iter_mut().zip(gc).zip(wd) {
                        *s += g * w;
                    }
                }
            }
            if let Some(s) = grads.slot(w) {
                let xd = vals[x.0].data();
                for (xc, gc) in xd.chunks(plane).zip(g.data().chunks(plane)).take(c) {
                    for ((s, x), g) in s.iter_mut().zip(xc).zip(gc) {
                        *s += g * x;
                    }
                }
            }
        })
    }

    /// Normalize over axis 0 at each position, then apply `gamma`, `beta` (both `[C]`).
    pub fn layer_norm0(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let tx = self.value(x);
        let c = tx.shape()[0];
        let plane = tx.len() / c.max(1);
        let (gd, bd) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let xd = tx.data();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; plane];
        let mut out = vec![0.0; tx.len()];
        for p in 0..plane {
            let mean = (0..c).map(|k| xd[k * plane + p]).sum::<f64>() / c as f64;
            let var = (0..c).map(|k| (xd[k * plane + p] - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[p] = is;
            for k in 0..c {
                let i = k * plane + p;
                xhat[i] = (xd[i] - mean) * is;
                out[i] = xhat[i] * gd[k] + bd[k];
            }
        }
        let out = Tensor::from_vec(tx.shape(), out);
        self.custom_op(out, &[x, gamma, beta], move |g, vals, grads| {
            let gdat = g.data();
            if let Some(s) = grads.slot(beta) {
                for k in 0..c {
                    s[k] += gdat[k * plane..(k + 1) * plane].iter().sum::<f64>();
                }
            }
            if let Some(s) = grads.slot(gamma) {
                for k in 0..c {
                    let mut acc = 0.0;
                    for p in 0..plane {
                        acc += gdat[k * plane + p] * xhat[k * plane + p];
                    }
                    s[k] += acc;
                }
            }
            if let Some(s) = grads.slot(x) {
                let gam = vals[gamma.0].data();
                let n = c as f64;
                for p in 0..plane {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for k in 0..c {
                        let i = k * plane + p;
                        let d = gdat[i] * gam[k];
                        sum_d += d;
                        sum_dx += d * xhat[i];
                    }
                    for k in 0..c {
                        let i = k * plane + p;
                        let d = gdat[i] * gam[k];
                        s[i] += inv_std[p] * (d - sum_d / n - xhat[i] * sum_dx / n);
                    }
                }
            }
        })
    }

    /// Nearest-neighbour 2x upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).dims3();
        let xd = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * h2 * w2];
        for k in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(k * h2 + y) * w2 + xx] = xd[(k * h + y / 2) * w + xx / 2];
                }
            }
        }
        let out = Tensor::from_vec(&[c, h2, w2], out);
        self.custom_op(out, &[x], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                let gd = g.data();
                for k in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            s[(k * h + y / 2) * w + xx / 2] += gd[(k * h2 + y) * w2 + xx];
                        }
                    }
                }
            }
        })
    }

    // ----- matrix ops -----------------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dims2();
        let (k2, m) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let mut out = vec![0.0; n * m];
        super::conv::gemm(n, k, m, self.value(a).data(), (k as isize, 1), self.value(b).data(), (m as isize, 1), &mut out, false);
        let out = Tensor::from_vec(&[n, m], out);
        self.custom_op(out, &[a, b], move |g, vals, grads| {
            if let Some(s) = grads.slot(a) {
                // dA = G * B^T
                super::conv::gemm(n, m, k, g.data(), (m as isize, 1), vals[b.0].data(), (1, m as isize), s, true);
            }
            if let Some(s) = grads.slot(b) {
                // dB = A^T * G
                super::conv::gemm(k, n, m, vals[a.0].data(), (1, k as isize), g.data(), (m as isize, 1), s, true);
            }
        })
    }

    /// Add `b: [m]` to every row of `x: [n, m]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, m) = self.value(x).dims2();
        assert_eq!(self.value(b).len(), m);
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(m.max(1)).take(n) {
            for (v, b) in row.iter_mut().zip(&bias) {
                *v += b;
            }
        }
        self.custom_op(out, &[x, b], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                for (s, g) in s.iter_mut().zip(g.data()) {
                    *s += g;
                }
            }
            if let Some(s) = grads.slot(b) {
                for row in g.data().chunks(m.max(1)).take(n) {
                    for (s, g) in s.iter_mut().zip(row) {
                        *s += g;
                    }
                }
            }
        })
    }

    // ----- reductions -----------------------------------------------------

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.custom_op(out, &[x], move |g, _, grads| {
            let gv = g.data()[0];
            if let Some(s) = grads.slot(x) {
                for s in s.iter_mut() {
                    *s += gv;
                }
            }
        })
    }

    /// `sum(x * w)` for a constant weight tensor; the usual probe in gradient checks.
    pub fn dot_const(&mut self, x: Var, w: &Tensor) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), w.shape(), "dot_const: shape mismatch");
        let out = Tensor::scalar(tx.data().iter().zip(w.data()).map(|(a, b)| a * b).sum());
        let w = w.clone();
        self.custom_op(out, &[x], move |g, _, grads| {
            let gv = g.data()[0];
            if let Some(s) = grads.slot(x) {
                for (s, w) in s.iter_mut().zip(w.data()) {
                    *s += gv * w;
                }
            }
        })
    }

    /// Weighted sum of scalar nodes.
    pub fn linear_comb(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, k)| self.value(v).data()[0] * k).sum();
        let terms = terms.to_vec();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.custom_op(Tensor::scalar(total), &parents, move |g, _, grads| {
            let gv = g.data()[0];
            for &(v, k) in &terms {
                if let Some(s) = grads.slot(v) {
                    s[0] += gv * k;
                }
            }
        })
    }
}

pub(crate) fn softmax_axis0(x: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for p in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for k in 0..c {
            m = m.max(x[k * plane + p]);
        }
        let mut z = 0.0;
        for k in 0..c {
            let e = (x[k * plane + p] - m).exp();
            out[k * plane + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * plane + p] /= z;
        }
    }
    out
}
