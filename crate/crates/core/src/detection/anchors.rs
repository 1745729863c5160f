use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::boxes::{limit_period, wrap_angle, Box3D};
use crate::error::{Error, Result};
use crate::geometry::BevGridSpec;

/// Per-class anchor geometry and matching/evaluation thresholds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// `(l, w, h)`.
    pub anchor_dims: [f64; 3],
    pub anchor_z: f64,
    pub match_iou: f64,
    pub unmatch_iou: f64,
    /// IoU needed for a true positive at evaluation.
    pub eval_iou: f64,
}

impl ClassSpec {
    fn new(name: &str, anchor_dims: [f64; 3], match_iou: f64, unmatch_iou: f64, eval_iou: f64) -> Self {
        Self { name: name.into(), anchor_dims, anchor_z: anchor_dims[2] / 2.0, match_iou, unmatch_iou, eval_iou }
    }

    pub fn car() -> Self {
        Self::new("car", [3.9, 1.6, 1.56], 0.5, 0.35, 0.5)
    }

    pub fn pedestrian() -> Self {
        Self::new("pedestrian", [0.8, 0.6, 1.73], 0.35, 0.2, 0.25)
    }

    pub fn cyclist() -> Self {
        Self::new("cyclist", [1.76, 0.6, 1.73], 0.35, 0.2, 0.25)
    }

    pub fn truck() -> Self {
        Self::new("truck", [8.0, 2.6, 3.2], 0.5, 0.35, 0.5)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    pub classes: Vec<ClassSpec>,
    pub yaws: Vec<f64>,
}

impl AnchorSpec {
    /// Car, pedestrian, cyclist.
    pub fn vod() -> Self {
        Self { classes: vec![ClassSpec::car(), ClassSpec::pedestrian(), ClassSpec::cyclist()], yaws: vec![0.0, PI / 2.0] }
    }

    /// VoD classes plus truck.
    pub fn tj4d() -> Self {
        let mut s = Self::vod();
        s.classes.push(ClassSpec::truck());
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() || self.yaws.is_empty() {
            return Err(Error::config("anchor spec needs at least one class and one yaw"));
        }
        for c in &self.classes {
            if !(0.0 <= c.unmatch_iou && c.unmatch_iou < c.match_iou && c.match_iou <= 1.0) {
                return Err(Error::config(format!("class `{}` needs 0 <= unmatch < match <= 1", c.name)));
            }
            if !(c.eval_iou > 0.0 && c.eval_iou <= 1.0) {
                return Err(Error::config(format!("class `{}` eval IoU must be in (0, 1]", c.name)));
            }
            if c.anchor_dims.iter().any(|&d| !(d > 0.0)) {
                return Err(Error::config(format!("class `{}` anchor dims must be positive", c.name)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn per_cell(&self) -> usize {
        self.classes.len() * self.yaws.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Dense anchors at the cell centers of `grid`.
    pub fn generate(&self, grid: &BevGridSpec) -> Anchors {
        let (ny, nx) = grid.grid_shape();
        let mut boxes = Vec::with_capacity(ny * nx * self.per_cell());
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = grid.cell_center(iy, ix);
                for (ci, c) in self.classes.iter().enumerate() {
                    for &yaw in &self.yaws {
                        boxes.push(Box3D::new([x, y, c.anchor_z], c.anchor_dims, yaw, ci));
                    }
                }
            }
        }
        Anchors { boxes, grid_shape: (ny, nx), per_cell: self.per_cell(), grid: grid.clone() }
    }
}

/// Flat anchor layout: index `(iy * nx + ix) * per_cell + class * num_yaws + yaw`.
#[derive(Clone, Debug)]
pub struct Anchors {
    pub boxes: Vec<Box3D>,
    pub grid_shape: (usize, usize),
    pub per_cell: usize,
    pub grid: BevGridSpec,
}

impl Anchors {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.grid_shape.0 * self.grid_shape.1
    }

    /// `(cell, slot)` of a flat anchor index.
    pub fn split(&self, i: usize) -> (usize, usize) {
        (i / self.per_cell, i % self.per_cell)
    }
}

pub const BOX_CODE_SIZE: usize = 7;

/// Residuals of `gt` relative to `anchor`: center offsets normalized by the
/// anchor's BEV diagonal (x, y) and height (z), log size ratios, wrapped yaw.
pub fn encode(gt: &Box3D, anchor: &Box3D) -> [f64; BOX_CODE_SIZE] {
    let diag = anchor.dims[0].hypot(anchor.dims[1]);
    [
        (gt.center[0] - anchor.center[0]) / diag,
        (gt.center[1] - anchor.center[1]) / diag,
        (gt.center[2] - anchor.center[2]) / anchor.dims[2],
        (gt.dims[0] / anchor.dims[0]).ln(),
        (gt.dims[1] / anchor.dims[1]).ln(),
        (gt.dims[2] / anchor.dims[2]).ln(),
        wrap_angle(gt.yaw - anchor.yaw),
    ]
}

pub fn decode(d: &[f64], anchor: &Box3D) -> Box3D {
    let diag = anchor.dims[0].hypot(anchor.dims[1]);
    Box3D::new(
        [anchor.center[0] + d[0] * diag, anchor.center[1] + d[1] * diag, anchor.center[2] + d[2] * anchor.dims[2]],
        [anchor.dims[0] * d[3].exp(), anchor.dims[1] * d[4].exp(), anchor.dims[2] * d[5].exp()],
        anchor.yaw + d[6],
        anchor.class_id,
    )
}

/// Heading half-plane bin: 0 for yaw in `[0, pi)`, 1 for `[pi, 2 pi)` modulo `2 pi`.
pub fn dir_target(yaw: f64) -> usize {
    usize::from(limit_period(yaw, 0.0, 2.0 * PI) >= PI)
}

/// Resolve the pi ambiguity of a regressed yaw with a direction bin.
pub fn apply_direction(yaw: f64, dir: usize) -> f64 {
    wrap_angle(limit_period(yaw, 0.0, PI) + PI * dir as f64)
}
