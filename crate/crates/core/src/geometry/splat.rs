//! Frustum construction and BEV sum-pooling ("splat").
//!
//! Two reduction modes are offered. `Deterministic` sorts contributions by
//! target cell (ties broken by point content) and reduces each cell's run in
//! that order, so the result is independent of input order and worker count.
//! `Fast` scatters in input order, split across rayon workers; its float
//! summation order depends on the split.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::camera::CameraModel;
use super::grid::{BevGridSpec, DepthBinSpec};
use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplatMode {
    #[default]
    Deterministic,
    Fast,
}

/// Ego-frame 3D points laid out `(bin, row, col)`.
#[derive(Clone, Debug)]
pub struct Frustum {
    pub num_bins: usize,
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
}

impl Frustum {
    pub fn point(&self, bin: usize, row: usize, col: usize) -> [f64; 3] {
        self.points[(bin * self.height + row) * self.width + col]
    }
}

/// Image-plane sample for feature cell `(row, col)`: the center of the
/// top-left image pixel the cell covers.
pub fn feature_pixel_center(row: usize, col: usize, stride: usize) -> (f64, f64) {
    ((col * stride) as f64 + 0.5, (row * stride) as f64 + 0.5)
}

pub fn build_frustum(feature_size: (usize, usize), bins: &DepthBinSpec, camera: &CameraModel, stride: usize) -> Result<Frustum> {
    let (h, w) = feature_size;
    let (ih, iw) = camera.image_size;
    if stride == 0 || stride * h > ih || stride * w > iw {
        return Err(Error::config(format!(
            "feature size {h}x{w} at stride {stride} exceeds image {ih}x{iw}"
        )));
    }
    bins.validate()?;
    let depths = bins.depths();
    let mut points = Vec::with_capacity(depths.len() * h * w);
    for &d in &depths {
        for row in 0..h {
            for col in 0..w {
                let (u, v) = feature_pixel_center(row, col, stride);
                points.push(camera.unproject(u, v, d));
            }
        }
    }
    Ok(Frustum { num_bins: depths.len(), height: h, width: w, points })
}

fn content_order(a: &[f64; 3], fa: &[f64], b: &[f64; 3], fb: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .chain(fa.iter().zip(fb).map(|(x, y)| x.total_cmp(y)))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Sum-pool per-point feature vectors (`features: [n, C]`) into a `[C, ny, nx]`
/// BEV map. Points outside the grid (including its z range) are dropped.
pub fn splat_to_bev(features: &Tensor, coords: &[[f64; 3]], grid: &BevGridSpec, mode: SplatMode) -> Result<Tensor> {
    let (n, c) = features.dims2();
    if n != coords.len() {
        return Err(Error::InvalidInput(format!("{n} feature rows but {} coordinates", coords.len())));
    }
    if c == 0 {
        return Err(Error::InvalidInput("features need at least one channel".into()));
    }
    let (ny, nx) = grid.grid_shape();
    let ncell = ny * nx;
    let fd = features.data();
    let cells: Vec<Option<usize>> = coords.iter().map(|&p| grid.cell_index_3d(p).map(|(iy, ix)| iy * nx + ix)).collect();
    let mut out = vec![0.0; c * ncell];
    match mode {
        SplatMode::Deterministic => {
            let mut order: Vec<usize> = (0..n).filter(|&i| cells[i].is_some()).collect();
            order.sort_by(|&a, &b| {
                cells[a].cmp(&cells[b]).then_with(|| content_order(&coords[a], &fd[a * c..(a + 1) * c], &coords[b], &fd[b * c..(b + 1) * c]))
            });
            let mut start = 0;
            while start < order.len() {
                let cell = cells[order[start]].expect("filtered");
                let mut end = start;
                while end < order.len() && cells[order[end]] == Some(cell) {
                    end += 1;
                }
                for ch in 0..c {
                    let mut acc = 0.0;
                    for &i in &order[start..end] {
                        acc += fd[i * c + ch];
                    }
                    out[ch * ncell + cell] = acc;
                }
                start = end;
            }
        }
        SplatMode::Fast => {
            let chunk = n.div_ceil(rayon::current_num_threads().max(1)).max(1024);
            let partial = (0..n)
                .into_par_iter()
                .with_min_len(chunk)
                .fold(
                    || vec![0.0; c * ncell],
                    |mut acc, i| {
                        if let Some(cell) = cells[i] {
                            for ch in 0..c {
                                acc[ch * ncell + cell] += fd[i * c + ch];
                            }
                        }
                        acc
                    },
                )
                .reduce(
                    || vec![0.0; c * ncell],
                    |mut a, b| {
                        for (x, y) in a.iter_mut().zip(b) {
                            *x += y;
                        }
                        a
                    },
                );
            out = partial;
        }
    }
    Ok(Tensor::from_vec(&[c, ny, nx], out))
}

/// Precomputed frustum-to-cell assignment for the lift-splat op. Points are
/// grouped into runs of equal cell; within a run they keep frustum order.
#[derive(Clone, Debug)]
pub struct SplatPlan {
    pub num_bins: usize,
    pub feature_size: (usize, usize),
    pub grid_shape: (usize, usize),
    /// Target cell per frustum point, `None` when out of range.
    pub cells: Vec<Option<u32>>,
    order: Vec<u32>,
    /// `(cell, start, end)` into `order`.
    intervals: Vec<(u32, u32, u32)>,
    pub mode: SplatMode,
}

impl SplatPlan {
    pub fn new(frustum: &Frustum, grid: &BevGridSpec, mode: SplatMode) -> Self {
        let (ny, nx) = grid.grid_shape();
        let cells: Vec<Option<u32>> = frustum
            .points
            .iter()
            .map(|&p| grid.cell_index_3d(p).map(|(iy, ix)| (iy * nx + ix) as u32))
            .collect();
        let mut order: Vec<u32> = (0..cells.len() as u32).filter(|&i| cells[i as usize].is_some()).collect();
        order.sort_by_key(|&i| (cells[i as usize], i));
        let mut intervals = Vec::new();
        let mut start = 0;
        while start < order.len() {
            let cell = cells[order[start] as usize].expect("filtered");
            let mut end = start;
            while end < order.len() && cells[order[end] as usize] == Some(cell) {
                end += 1;
            }
            intervals.push((cell, start as u32, end as u32));
            start = end;
        }
        Self {
            num_bins: frustum.num_bins,
            feature_size: (frustum.height, frustum.width),
            grid_shape: (ny, nx),
            cells,
            order,
            intervals,
            mode,
        }
    }

    pub fn in_range_count(&self) -> usize {
        self.order.len()
    }

    /// BEV features from depth probabilities `[D, h, w]` and context `[C, h, w]`:
    /// every frustum point carries `context[:, pixel] * depth[bin, pixel]`.
    pub fn lift_splat(&self, depth: &Tensor, context: &Tensor) -> Tensor {
        let (d, h, w) = depth.dims3();
        let (c, h2, w2) = context.dims3();
        assert_eq!((d, h, w), (self.num_bins, self.feature_size.0, self.feature_size.1), "depth shape does not match plan");
        assert_eq!((h2, w2), (h, w), "context shape does not match plan");
        let (ny, nx) = self.grid_shape;
        let ncell = ny * nx;
        let npix = h * w;
        let (dd, cd) = (depth.data(), context.data());
        let mut out = vec![0.0; c * ncell];
        match self.mode {
            SplatMode::Deterministic => {
                for &(cell, s, e) in &self.intervals {
                    let run = &self.order[s as usize..e as usize];
                    for ch in 0..c {
                        let ctx = &cd[ch * npix..(ch + 1) * npix];
                        let mut acc = 0.0;
                        for &p in run {
                            let p = p as usize;
                            acc += ctx[p % npix] * dd[p];
                        }
                        out[ch * ncell + cell as usize] = acc;
                    }
                }
            }
            SplatMode::Fast => {
                for (p, cell) in self.cells.iter().enumerate() {
                    if let Some(cell) = cell {
                        let pix = p % npix;
                        let dp = dd[p];
                        for ch in 0..c {
                            out[ch * ncell + *cell as usize] += cd[ch * npix + pix] * dp;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[c, ny, nx], out)
    }

    /// Gradients of the lift-splat output w.r.t. depth and context.
    fn lift_splat_backward(&self, depth: &Tensor, context: &Tensor, grad: &Tensor, gdepth: Option<&mut [f64]>, gctx: Option<&mut [f64]>) {
        let (c, h, w) = context.dims3();
        let npix = h * w;
        let (ny, nx) = self.grid_shape;
        let ncell = ny * nx;
        let (dd, cd, gd) = (depth.data(), context.data(), grad.data());
        if let Some(gdep) = gdepth {
            for &(cell, s, e) in &self.intervals {
                for &p in &self.order[s as usize..e as usize] {
                    let p = p as usize;
                    let pix = p % npix;
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += cd[ch * npix + pix] * gd[ch * ncell + cell as usize];
                    }
                    gdep[p] += acc;
                }
            }
        }
        if let Some(gc) = gctx {
            for &(cell, s, e) in &self.intervals {
                for &p in &self.order[s as usize..e as usize] {
                    let p = p as usize;
                    let pix = p % npix;
                    let dp = dd[p];
                    for ch in 0..c {
                        gc[ch * npix + pix] += dp * gd[ch * ncell + cell as usize];
                    }
                }
            }
        }
    }

    /// Per-pixel in-range depth mass `sum_{bins in range} depth[bin, pixel]`.
    pub fn in_range_mass(&self, depth: &Tensor) -> Vec<f64> {
        let (_, h, w) = depth.dims3();
        let npix = h * w;
        let mut mass = vec![0.0; npix];
        for (p, cell) in self.cells.iter().enumerate() {
            if cell.is_some() {
                mass[p % npix] += depth.data()[p];
            }
        }
        mass
    }
}

impl Graph<'_> {
    pub fn lift_splat(&mut self, depth: Var, context: Var, plan: Arc<SplatPlan>) -> Var {
        let out = plan.lift_splat(self.value(depth), self.value(context));
        self.custom_op(out, &[depth, context], move |g, vals, grads| {
            let want_d = grads.wants(depth);
            let want_c = grads.wants(context);
            let (dv, cv) = (&vals[depth.0], &vals[context.0]);
            if want_d && want_c {
                let mut gd = vec![0.0; dv.len()];
                let mut gc = vec![0.0; cv.len()];
                plan.lift_splat_backward(dv, cv, g, Some(&mut gd), Some(&mut gc));
                for (s, v) in grads.slot(depth).expect("checked").iter_mut().zip(gd) {
                    *s += v;
                }
                for (s, v) in grads.slot(context).expect("checked").iter_mut().zip(gc) {
                    *s += v;
                }
            } else if want_d {
                plan.lift_splat_backward(dv, cv, g, grads.slot(depth), None);
            } else if want_c {
                plan.lift_splat_backward(dv, cv, g, None, grads.slot(context));
            }
        })
    }
}
