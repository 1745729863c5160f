use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with optional global gradient-norm clipping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect::<Vec<_>>();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(10.0), step: 0, v: m.clone(), m }
    }

    /// First and second moment estimates, one vector per parameter.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restore saved moments; shapes must match the current ones.
    pub fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<(), String> {
        let same = |a: &[Vec<f64>], b: &[Vec<f64>]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len());
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err("optimizer state does not match the parameter layout".into());
        }
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// `grads[i]` is the gradient of parameter `i` (None = untouched this step).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), store.len());
        self.step += 1;
        let norm = grads.iter().flatten().flat_map(|t| t.data()).map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j] * clip;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new(0);
        let id = store.add("x", Tensor::from_vec(&[2], vec![3.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..500 {
            let x = store.get(id).data().to_vec();
            let g = Tensor::from_vec(&[2], vec![2.0 * (x[0] - 1.0), 2.0 * (x[1] + 0.5)]);
            adam.update(&mut store, &[Some(g)]);
        }
        let x = store.get(id).data();
        assert!((x[0] - 1.0).abs() < 1e-3 && (x[1] + 0.5).abs() < 1e-3, "{x:?}");
    }
}
