use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Metric BEV discretization. Every axis uses half-open `[min, max)` bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BevGridSpec {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    /// `(dx, dy)` in meters.
    pub cell_size: (f64, f64),
}

const MULTIPLE_TOL: f64 = 1e-9;

fn cells_along(range: (f64, f64), cell: f64) -> Option<usize> {
    let n = (range.1 - range.0) / cell;
    let r = n.round();
    ((n - r).abs() <= MULTIPLE_TOL * r.max(1.0) && r >= 1.0).then_some(r as usize)
}

impl BevGridSpec {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64), cell_size: (f64, f64)) -> Result<Self> {
        let g = Self { x_range, y_range, z_range, cell_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for (axis, r) in [("x", self.x_range), ("y", self.y_range), ("z", self.z_range)] {
            if !(r.1 > r.0) || !r.0.is_finite() || !r.1.is_finite() {
                return Err(Error::InvalidInput(format!("{axis} range must satisfy min < max, got {r:?}")));
            }
        }
        let (dx, dy) = self.cell_size;
        if !(dx > 0.0 && dy > 0.0) {
            return Err(Error::InvalidInput("cell size must be positive".into()));
        }
        if cells_along(self.x_range, dx).is_none() || cells_along(self.y_range, dy).is_none() {
            return Err(Error::InvalidInput(format!(
                "ranges x={:?} y={:?} are not integer multiples of cell size {:?}",
                self.x_range, self.y_range, self.cell_size
            )));
        }
        Ok(())
    }

    /// `(ny, nx)`.
    pub fn grid_shape(&self) -> (usize, usize) {
        let nx = cells_along(self.x_range, self.cell_size.0).expect("validated grid");
        let ny = cells_along(self.y_range, self.cell_size.1).expect("validated grid");
        (ny, nx)
    }

    pub fn num_cells(&self) -> usize {
        let (ny, nx) = self.grid_shape();
        ny * nx
    }

    /// Floor binning of a ground-plane point, `None` outside `[min, max)`.
    pub fn cell_index(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let (ny, nx) = self.grid_shape();
        let ix = (((x - self.x_range.0) / self.cell_size.0).floor() as usize).min(nx - 1);
        let iy = (((y - self.y_range.0) / self.cell_size.1).floor() as usize).min(ny - 1);
        Some((iy, ix))
    }

    /// Like [`cell_index`](Self::cell_index) but also requires `z` in range.
    pub fn cell_index_3d(&self, p: [f64; 3]) -> Option<(usize, usize)> {
        if !(p[2] >= self.z_range.0 && p[2] < self.z_range.1) {
            return None;
        }
        self.cell_index(p[0], p[1])
    }

    pub fn flat_index(&self, x: f64, y: f64) -> Option<usize> {
        let (_, nx) = self.grid_shape();
        self.cell_index(x, y).map(|(iy, ix)| iy * nx + ix)
    }

    pub fn cell_center(&self, iy: usize, ix: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.cell_size.0,
            self.y_range.0 + (iy as f64 + 0.5) * self.cell_size.1,
        )
    }

    /// Same extent with cells `factor` times larger on x and y.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        let (ny, nx) = self.grid_shape();
        if factor == 0 || ny % factor != 0 || nx % factor != 0 {
            return Err(Error::config(format!("grid {ny}x{nx} is not divisible by {factor}")));
        }
        Self::new(
            self.x_range,
            self.y_range,
            self.z_range,
            (self.cell_size.0 * factor as f64, self.cell_size.1 * factor as f64),
        )
    }

    /// View-of-Delft point-cloud range.
    pub fn vod() -> Self {
        Self { x_range: (0.0, 51.2), y_range: (-25.6, 25.6), z_range: (-3.0, 2.0), cell_size: (0.16, 0.16) }
    }

    /// TJ4D point-cloud range.
    pub fn tj4d() -> Self {
        Self { x_range: (0.0, 69.12), y_range: (-39.68, 39.68), z_range: (-4.0, 2.0), cell_size: (0.16, 0.16) }
    }

    /// Desk-scale grid used for synthetic experiments (64 x 64 cells).
    pub fn toy() -> Self {
        Self { x_range: (0.0, 25.6), y_range: (-12.8, 12.8), z_range: (-1.0, 4.0), cell_size: (0.4, 0.4) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DepthSpacing {
    #[default]
    Uniform,
}

/// Discrete depth hypotheses for lifting. Bin `k` sits at depth
/// `d_min + k * step` (endpoints inclusive); its edges are the midpoints to
/// its neighbours, extended by half a step at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthBinSpec {
    pub d_min: f64,
    pub d_max: f64,
    pub num_bins: usize,
    #[serde(default)]
    pub spacing: DepthSpacing,
}

impl DepthBinSpec {
    pub fn new(d_min: f64, d_max: f64, num_bins: usize) -> Result<Self> {
        let b = Self { d_min, d_max, num_bins, spacing: DepthSpacing::Uniform };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            return Err(Error::InvalidInput(format!("depth range must satisfy 0 < d_min < d_max, got [{}, {}]", self.d_min, self.d_max)));
        }
        if self.num_bins < 2 {
            return Err(Error::InvalidInput("depth bins need num_bins >= 2".into()));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        (self.d_max - self.d_min) / (self.num_bins - 1) as f64
    }

    pub fn depths(&self) -> Vec<f64> {
        let s = self.step();
        (0..self.num_bins).map(|k| self.d_min + k as f64 * s).collect()
    }

    pub fn edges(&self) -> Vec<f64> {
        let s = self.step();
        (0..=self.num_bins).map(|k| self.d_min + (k as f64 - 0.5) * s).collect()
    }

    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        let s = self.step();
        let k = ((depth - self.d_min) / s + 0.5).floor();
        (k >= 0.0 && k < self.num_bins as f64).then_some(k as usize)
    }

    /// Default VoD layout: 64 uniform bins over [1.0, 51.2] m.
    pub fn vod() -> Self {
        Self { d_min: 1.0, d_max: 51.2, num_bins: 64, spacing: DepthSpacing::Uniform }
    }

    pub fn tj4d() -> Self {
        Self { d_min: 1.0, d_max: 69.12, num_bins: 72, spacing: DepthSpacing::Uniform }
    }

    pub fn toy() -> Self {
        Self { d_min: 2.0, d_max: 25.0, num_bins: 24, spacing: DepthSpacing::Uniform }
    }
}
