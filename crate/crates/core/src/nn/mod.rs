//! Minimal differentiable tensor toolkit: tensors, a reverse-mode tape,
//! convolution, layers and Adam.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Gradients, Graph, Grads, Var};
pub use layers::{ChannelNorm, Conv2d, PreActBranch, ResidualSpec, SecondFpn, SecondFpnConfig};
pub use optim::Adam;
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random tensor in `[lo, hi)`; deterministic in `seed`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, sample_coords, DEFAULT_EPS};
    use super::*;

    /// Gradient of `sum(op(x) * probe)` w.r.t. `x` against finite differences.
    fn check_unary(shape: &[usize], op: impl Fn(&mut Graph, Var) -> Var) {
        let x = random_tensor(shape, -1.0, 1.0, 11);
        let mut g = Graph::standalone();
        let xv = g.leaf(x.clone());
        let y = op(&mut g, xv);
        let probe = random_tensor(g.shape(y), -1.0, 1.0, 12);
        let l = g.dot_const(y, &probe);
        let grads = g.backward(l);
        let analytic = grads.wrt(xv).unwrap().clone();
        let f = |t: &Tensor| {
            let mut g = Graph::standalone();
            let xv = g.input(t.clone());
            let y = op(&mut g, xv);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let r = check(f, &x, &analytic, &sample_coords(x.len(), 64, 0), DEFAULT_EPS);
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn softmax_gradient() {
        check_unary(&[5, 3, 4], |g, x| g.softmax0(x));
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(&[6, 2, 3], |g, x| {
            let gamma = g.input(random_tensor(&[6], 0.5, 1.5, 3));
            let beta = g.input(random_tensor(&[6], -0.5, 0.5, 4));
            g.layer_norm0(x, gamma, beta)
        });
    }

    #[test]
    fn conv_gradient_wrt_input_and_weight() {
        for &(k, s) in &[(3usize, 1usize), (3, 2), (1, 1)] {
            check_unary(&[3, 6, 5], move |g, x| {
                let w = g.input(random_tensor(&[4, 3, k, k], -0.5, 0.5, 5));
                g.conv2d(x, w, None, s, k / 2)
            });
            check_unary(&[4, 3, k, k], move |g, w| {
                let x = g.input(random_tensor(&[3, 6, 5], -1.0, 1.0, 6));
                g.conv2d(x, w, None, s, k / 2)
            });
        }
    }

    #[test]
    fn structural_ops_gradient() {
        check_unary(&[2, 3, 3], |g, x| g.upsample2x(x));
        check_unary(&[2, 3, 3], |g, x| {
            let y = g.scale(x, 2.0);
            g.concat0(&[x, y])
        });
        check_unary(&[1, 3, 3], |g, w| {
            let x = g.input(random_tensor(&[4, 3, 3], -1.0, 1.0, 9));
            g.mul_broadcast0(x, w)
        });
        check_unary(&[4, 5], |g, a| {
            let b = g.input(random_tensor(&[5, 3], -1.0, 1.0, 10));
            g.matmul(a, b)
        });
        check_unary(&[5, 3], |g, b| {
            let a = g.input(random_tensor(&[4, 5], -1.0, 1.0, 10));
            g.matmul(a, b)
        });
    }

    #[test]
    fn shared_parameter_accumulates_one_gradient() {
        let mut store = ParamStore::new(1);
        let id = store.add("w", Tensor::from_vec(&[1], vec![3.0]));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let grads = g.backward(p);
        let pg = grads.params();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].1.data()[0], 6.0);
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store).without_grad();
        let x = g.leaf(Tensor::full(&[2], 1.0));
        let y = g.relu(x);
        assert!(!g.grad_enabled());
        assert_eq!(g.value(y).data(), &[1.0, 1.0]);
    }
}
