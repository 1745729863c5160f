//! 2D convolution through im2col + GEMM.

use super::graph::{Graph, Var};
use super::tensor::Tensor;

/// `c[m,n] (+)= a[m,k] * b[k,n]` with arbitrary (row, col) strides for `a`
/// and `b`; `c` is contiguous row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides; callers pass strides derived from the shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        let ho = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let wo = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn im2col(x: &[f64], geo: &ConvGeometry) -> Vec<f64> {
    let (ho, wo) = geo.out_hw();
    let (h, w, k, s, p) = (geo.height as isize, geo.width as isize, geo.kernel, geo.stride as isize, geo.pad as isize);
    let mut cols = vec![0.0; geo.rows() * ho * wo];
    for c in 0..geo.in_channels {
        let plane = &x[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let src = &plane[(iy * w) as usize..((iy + 1) * w) as usize];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], geo: &ConvGeometry, dx: &mut [f64]) {
    let (ho, wo) = geo.out_hw();
    let (h, w, k, s, p) = (geo.height as isize, geo.width as isize, geo.kernel, geo.stride as isize, geo.pad as isize);
    for c in 0..geo.in_channels {
        let plane = &mut dx[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w {
                            plane[(iy * w + ix) as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Plain forward convolution (no graph), used by tests and inference helpers.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = x.dims3();
    let o = w.shape()[0];
    let k = w.shape()[2];
    assert_eq!(w.shape(), &[o, c, k, k], "conv weight shape mismatch");
    let geo = ConvGeometry { in_channels: c, height: h, width: wd, kernel: k, stride, pad };
    let (ho, wo) = geo.out_hw();
    let mut out = vec![0.0; o * ho * wo];
    if geo.is_pointwise() {
        gemm(o, geo.rows(), ho * wo, w.data(), (geo.rows() as isize, 1), x.data(), ((ho * wo) as isize, 1), &mut out, false);
    } else {
        let cols = im2col(x.data(), &geo);
        gemm(o, geo.rows(), ho * wo, w.data(), (geo.rows() as isize, 1), &cols, ((ho * wo) as isize, 1), &mut out, false);
    }
    if let Some(b) = b {
        for (ch, plane) in out.chunks_mut(ho * wo).enumerate() {
            let bv = b.data()[ch];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    Tensor::from_vec(&[o, ho, wo], out)
}

impl Graph<'_> {
    /// `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]` -> `[O, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let (c, h, wd) = self.value(x).dims3();
        let o = self.value(w).shape()[0];
        let k = self.value(w).shape()[2];
        let geo = ConvGeometry { in_channels: c, height: h, width: wd, kernel: k, stride, pad };
        let (ho, wo) = geo.out_hw();
        let npos = ho * wo;
        let rows = geo.rows();
        let mut parents = vec![x, w];
        parents.extend(b);
        self.custom_op(out, &parents, move |g, vals, grads| {
            let gd = g.data();
            if let Some(bv) = b {
                if let Some(s) = grads.slot(bv) {
                    for (ch, plane) in gd.chunks(npos).enumerate() {
                        s[ch] += plane.iter().sum::<f64>();
                    }
                }
            }
            let pointwise = geo.is_pointwise();
            let want_w = grads.wants(w);
            let want_x = grads.wants(x);
            if want_w {
                let cols_owned;
                let cols: &[f64] = if pointwise {
                    vals[x.0].data()
                } else {
                    cols_owned = im2col(vals[x.0].data(), &geo);
                    &cols_owned
                };
                let s = grads.slot(w).expect("checked");
                // dW[o, r] += sum_p G[o, p] * cols[r, p]
                gemm(o, npos, rows, gd, (npos as isize, 1), cols, (1, npos as isize), s, true);
            }
            if want_x {
                let wdat = vals[w.0].data();
                if pointwise {
                    let s = grads.slot(x).expect("checked");
                    gemm(rows, o, npos, wdat, (1, rows as isize), gd, (npos as isize, 1), s, true);
                } else {
                    let mut dcols = vec![0.0; rows * npos];
                    gemm(rows, o, npos, wdat, (1, rows as isize), gd, (npos as isize, 1), &mut dcols, false);
                    let s = grads.slot(x).expect("checked");
                    col2im_add(&dcols, &geo, s);
                }
            }
        })
    }
}
