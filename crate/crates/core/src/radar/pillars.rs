use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cloud::RadarPointCloud;
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PillarConfig {
    pub max_points: usize,
    pub max_pillars: usize,
}

impl Default for PillarConfig {
    fn default() -> Self {
        Self { max_points: 32, max_pillars: 12_000 }
    }
}

/// Decorated points grouped into occupied BEV columns.
#[derive(Clone, Debug)]
pub struct PillarBatch {
    /// `[num_pillars, max_points, D]`, rows past `point_counts[p]` are zero.
    pub features: Tensor,
    /// `(iy, ix)` per pillar, unique, row-major sorted.
    pub coords: Vec<(usize, usize)>,
    pub point_counts: Vec<usize>,
    pub grid_shape: (usize, usize),
}

impl PillarBatch {
    pub fn num_pillars(&self) -> usize {
        self.coords.len()
    }

    pub fn max_points(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Decoration width: xyz, selected extras, offset to pillar mean, offset to cell center.
pub fn decoration_width(num_extras: usize) -> usize {
    3 + num_extras + 3 + 2
}

/// Group in-range points into pillars and decorate them.
///
/// `channels` selects (and orders) the schema's extra channels; extras are
/// normalized with the schema constants. When more than `max_pillars` cells
/// are occupied, the most populated survive (ties: row-major order). Pillars
/// holding more than `max_points` points keep a seeded random subset.
pub fn pillarize(cloud: &RadarPointCloud, grid: &BevGridSpec, cfg: &PillarConfig, channels: &[usize], seed: u64) -> Result<PillarBatch> {
    if cfg.max_points == 0 || cfg.max_pillars == 0 {
        return Err(Error::config("max_points and max_pillars must be >= 1"));
    }
    grid.validate()?;
    if let Some(&c) = channels.iter().find(|&&c| c >= cloud.schema.num_extras()) {
        return Err(Error::config(format!("extra channel {c} out of range for schema `{}`", cloud.schema.name)));
    }
    let (ny, nx) = grid.grid_shape();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..cloud.len() {
        if let Some((iy, ix)) = grid.cell_index_3d(cloud.point(i)) {
            groups.entry(iy * nx + ix).or_default().push(i);
        }
    }
    let mut cells: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
    if cells.len() > cfg.max_pillars {
        cells.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        cells.truncate(cfg.max_pillars);
        cells.sort_by_key(|c| c.0);
    }

    let d = decoration_width(channels.len());
    let m = cfg.max_points;
    let mut features = Tensor::zeros(&[cells.len(), m, d]);
    let mut coords = Vec::with_capacity(cells.len());
    let mut counts = Vec::with_capacity(cells.len());
    let fd = features.data_mut();
    for (p, (cell, members)) in cells.iter().enumerate() {
        let (iy, ix) = (cell / nx, cell % nx);
        let kept: Vec<usize> = if members.len() > m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (*cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut idx: Vec<usize> = sample(&mut rng, members.len(), m).into_iter().collect();
            idx.sort_unstable();
            idx.into_iter().map(|k| members[k]).collect()
        } else {
            members.clone()
        };
        let n = kept.len() as f64;
        let mut mean = [0.0; 3];
        for &i in &kept {
            let q = cloud.point(i);
            for a in 0..3 {
                mean[a] += q[a] / n;
            }
        }
        let (cx, cy) = grid.cell_center(iy, ix);
        for (r, &i) in kept.iter().enumerate() {
            let q = cloud.point(i);
            let row = &mut fd[(p * m + r) * d..(p * m + r + 1) * d];
            row[..3].copy_from_slice(&q);
            for (k, &ch) in channels.iter().enumerate() {
                row[3 + k] = cloud.schema.extra_channels[ch].normalize(cloud.extra(i, ch));
            }
            let o = 3 + channels.len();
            for a in 0..3 {
                row[o + a] = q[a] - mean[a];
            }
            row[o + 3] = q[0] - cx;
            row[o + 4] = q[1] - cy;
        }
        coords.push((iy, ix));
        counts.push(kept.len());
    }
    Ok(PillarBatch { features, coords, point_counts: counts, grid_shape: (ny, nx) })
}

/// Shared per-point affine map + ReLU, then max over each pillar's valid rows.
#[derive(Clone, Debug)]
pub struct PillarFeatureNet {
    pub weight: ParamId,
    pub bias: ParamId,
    /// Fixed per-column input scaling so raw meters and normalized extras
    /// enter with comparable magnitude.
    input_scale: Arc<Tensor>,
    pub in_dim: usize,
    pub out_channels: usize,
}

impl PillarFeatureNet {
    pub fn new(store: &mut ParamStore, name: &str, num_extras: usize, out_channels: usize, grid: &BevGridSpec) -> Self {
        let in_dim = decoration_width(num_extras);
        let weight = store.add_he(format!("{name}.weight"), &[in_dim, out_channels], in_dim);
        let bias = store.add_const(format!("{name}.bias"), &[out_channels], 0.0);
        let ext = |r: (f64, f64)| r.0.abs().max(r.1.abs()).max(1e-6);
        let mut scale = vec![1.0 / ext(grid.x_range), 1.0 / ext(grid.y_range), 1.0 / ext(grid.z_range)];
        scale.extend(std::iter::repeat_n(1.0, num_extras));
        let (dx, dy) = grid.cell_size;
        scale.extend([1.0 / dx, 1.0 / dy, 1.0, 1.0 / dx, 1.0 / dy]);
        Self { weight, bias, input_scale: Arc::new(Tensor::from_vec(&[in_dim], scale)), in_dim, out_channels }
    }

    /// `[P, C]` pillar features.
    pub fn forward(&self, g: &mut Graph, batch: &PillarBatch) -> Var {
        let (p, m, d) = (batch.num_pillars(), batch.max_points(), batch.width());
        assert_eq!(d, self.in_dim, "pillar decoration width mismatch");
        let mut x = batch.features.clone().reshape(&[p * m, d]);
        for row in x.data_mut().chunks_mut(d) {
            for (v, s) in row.iter_mut().zip(self.input_scale.data()) {
                *v *= s;
            }
        }
        let x = g.input(x);
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        let h = g.add_row_bias(h, b);
        let h = g.relu(h);
        g.masked_max_rows(h, m, Arc::new(batch.point_counts.clone()))
    }
}

impl Graph<'_> {
    /// `x: [P * M, C]` -> `[P, C]`, max over the first `counts[p]` rows of each
    /// group of `M`. Groups with zero valid rows produce zeros.
    pub fn masked_max_rows(&mut self, x: Var, m: usize, counts: Arc<Vec<usize>>) -> Var {
        let (rows, c) = self.value(x).dims2();
        let p = counts.len();
        assert_eq!(rows, p * m, "masked_max_rows: row count mismatch");
        let xd = self.value(x).data();
        let mut out = vec![0.0; p * c];
        let mut arg = vec![usize::MAX; p * c];
        for (pi, &n) in counts.iter().enumerate() {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut bi = usize::MAX;
                for r in 0..n.min(m) {
                    let i = (pi * m + r) * c + ch;
                    if xd[i] > best {
                        best = xd[i];
                        bi = i;
                    }
                }
                if bi != usize::MAX {
                    out[pi * c + ch] = best;
                    arg[pi * c + ch] = bi;
                }
            }
        }
        let out = Tensor::from_vec(&[p, c], out);
        self.custom_op(out, &[x], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                for (k, &i) in arg.iter().enumerate() {
                    if i != usize::MAX {
                        s[i] += g.data()[k];
                    }
                }
            }
        })
    }

    /// Place pillar rows `x: [P, C]` into a zero `[C, ny, nx]` map.
    pub fn scatter_pillars(&mut self, x: Var, coords: &[(usize, usize)], grid_shape: (usize, usize)) -> Result<Var> {
        let (p, c) = self.value(x).dims2();
        let out = scatter_rows(self.value(x), coords, grid_shape)?;
        let (ny, nx) = grid_shape;
        let cells: Vec<usize> = coords.iter().map(|&(iy, ix)| iy * nx + ix).collect();
        let ncell = ny * nx;
        Ok(self.custom_op(out, &[x], move |g, _, grads| {
            if let Some(s) = grads.slot(x) {
                for pi in 0..p {
                    for ch in 0..c {
                        s[pi * c + ch] += g.data()[ch * ncell + cells[pi]];
                    }
                }
            }
        }))
    }
}

/// Non-differentiable pillar scatter; duplicate coordinates are a contract error.
pub fn scatter_rows(x: &Tensor, coords: &[(usize, usize)], grid_shape: (usize, usize)) -> Result<Tensor> {
    let (p, c) = x.dims2();
    let (ny, nx) = grid_shape;
    if coords.len() != p {
        return Err(Error::Contract(format!("{p} pillar rows but {} coordinates", coords.len())));
    }
    let mut seen = vec![false; ny * nx];
    let mut out = Tensor::zeros(&[c, ny, nx]);
    for (pi, &(iy, ix)) in coords.iter().enumerate() {
        if iy >= ny || ix >= nx {
            return Err(Error::Contract(format!("pillar coordinate ({iy}, {ix}) outside {ny}x{nx} grid")));
        }
        let cell = iy * nx + ix;
        if std::mem::replace(&mut seen[cell], true) {
            return Err(Error::Contract(format!("duplicate pillar coordinate ({iy}, {ix})")));
        }
        for ch in 0..c {
            out.data_mut()[ch * ny * nx + cell] = x.data()[pi * c + ch];
        }
    }
    Ok(out)
}
