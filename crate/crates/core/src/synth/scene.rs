use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::render::render_scene;
use crate::detection::{bev_intersection, Box3D};
use crate::error::{Error, Result};
use crate::geometry::{BevGridSpec, CameraModel};
use crate::radar::{RadarPointCloud, RadarSchema};
use crate::seed::rng_for;

/// Appearance and radar statistics of one object class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Mean `(l, w, h)` in meters.
    pub dims_mean: [f64; 3],
    pub dims_std: [f64; 3],
    pub rcs_mean_dbsm: f64,
    pub rcs_std_dbsm: f64,
    pub color: [f32; 3],
    pub max_speed: f64,
}

impl ClassProfile {
    pub fn car() -> Self {
        Self { name: "car".into(), dims_mean: [3.9, 1.6, 1.56], dims_std: [0.2, 0.08, 0.08], rcs_mean_dbsm: 8.0, rcs_std_dbsm: 6.0, color: [0.85, 0.15, 0.1], max_speed: 10.0 }
    }

    pub fn pedestrian() -> Self {
        Self { name: "pedestrian".into(), dims_mean: [0.8, 0.6, 1.73], dims_std: [0.05, 0.05, 0.08], rcs_mean_dbsm: 2.0, rcs_std_dbsm: 6.0, color: [0.15, 0.3, 0.9], max_speed: 1.5 }
    }

    pub fn cyclist() -> Self {
        Self { name: "cyclist".into(), dims_mean: [1.76, 0.6, 1.73], dims_std: [0.08, 0.05, 0.08], rcs_mean_dbsm: 4.0, rcs_std_dbsm: 6.0, color: [0.1, 0.75, 0.2], max_speed: 5.0 }
    }

    pub fn truck() -> Self {
        Self { name: "truck".into(), dims_mean: [8.0, 2.6, 3.2], dims_std: [0.4, 0.1, 0.15], rcs_mean_dbsm: 14.0, rcs_std_dbsm: 6.0, color: [0.9, 0.8, 0.1], max_speed: 8.0 }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.dims_mean.iter().all(|&d| d > 0.0)
            && self.dims_std.iter().all(|&s| s >= 0.0)
            && self.rcs_std_dbsm >= 0.0
            && self.max_speed >= 0.0
            && self.color.iter().all(|c| (0.0..=1.0).contains(c));
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("class profile `{}` has invalid distributions", self.name)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub schema: RadarSchema,
    pub classes: Vec<ClassProfile>,
    /// Inclusive range of objects requested per frame.
    pub objects_per_frame: (usize, usize),
    /// Inclusive range of radar returns drawn per object before dropout.
    pub points_per_object: (usize, usize),
    pub dropout: f64,
    /// Clutter points as a fraction of object points, with a floor.
    pub clutter_fraction: f64,
    pub min_clutter: usize,
    pub clutter_rcs_mean_dbsm: f64,
    pub clutter_rcs_std_dbsm: f64,
    /// Radial jitter of returns about the box surface (m).
    pub surface_jitter: f64,
    /// Probability that an object is static.
    pub static_fraction: f64,
    /// Forward ego speed seen by the uncompensated velocity channel.
    pub ego_speed: f64,
    /// Nearest allowed object center distance (m).
    pub min_range: f64,
    pub camera: CameraModel,
    pub grid: BevGridSpec,
    pub seed: u64,
}

/// Gap kept between placed objects (m).
const PLACEMENT_GAP: f64 = 0.5;
const PLACEMENT_RETRIES: usize = 50;

impl SceneConfig {
    /// Desk-scale scene matching the `toy` grid with a 128 x 192 camera.
    pub fn toy(schema: RadarSchema) -> Self {
        let mut classes = vec![ClassProfile::car(), ClassProfile::pedestrian(), ClassProfile::cyclist()];
        if schema.name == "tj4d" {
            classes.push(ClassProfile::truck());
        }
        Self {
            schema,
            classes,
            objects_per_frame: (2, 4),
            points_per_object: (2, 8),
            dropout: 0.15,
            clutter_fraction: 0.1,
            min_clutter: 4,
            clutter_rcs_mean_dbsm: -10.0,
            clutter_rcs_std_dbsm: 3.0,
            surface_jitter: 0.05,
            static_fraction: 0.3,
            ego_speed: 0.0,
            min_range: 5.0,
            camera: CameraModel::forward_looking(96.0, (128, 192), 1.5).expect("valid toy camera"),
            grid: BevGridSpec::toy(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        self.camera.validate()?;
        self.grid.validate()?;
        if self.classes.is_empty() {
            return Err(Error::config("scene needs at least one class"));
        }
        for c in &self.classes {
            c.validate()?;
        }
        let (a, b) = self.objects_per_frame;
        let (p, q) = self.points_per_object;
        if a > b || p > q {
            return Err(Error::config("objects_per_frame and points_per_object ranges must be non-empty"));
        }
        for (name, v) in [("dropout", self.dropout), ("static_fraction", self.static_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.clutter_fraction >= 0.0 && self.clutter_rcs_std_dbsm >= 0.0 && self.surface_jitter >= 0.0) {
            return Err(Error::config("clutter and jitter settings must be non-negative"));
        }
        if self.surface_jitter >= 0.1 {
            return Err(Error::config("surface_jitter must stay below the 0.1 m containment margin"));
        }
        if !(self.min_range > 0.0 && self.min_range < self.grid.x_range.1) {
            return Err(Error::config("min_range must lie inside the grid"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seed: u64,
    pub requested_objects: usize,
    pub placed_objects: usize,
    /// Per-object velocity `(vx, vy)` in the ego frame, aligned with `gt`.
    pub velocities: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: String,
    pub image: Image,
    pub radar: RadarPointCloud,
    pub gt: Vec<Box3D>,
    pub camera: CameraModel,
    pub meta: FrameMeta,
}

fn normal(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        mean
    } else {
        Normal::new(mean, std).expect("std checked").sample(rng)
    }
}

fn fits(cfg: &SceneConfig, b: &Box3D) -> bool {
    let g = &cfg.grid;
    let corners_ok = b.bev_corners().iter().all(|c| {
        c[0] >= g.x_range.0 + 1.0 && c[0] < g.x_range.1 && c[1] >= g.y_range.0 && c[1] < g.y_range.1
    });
    // Keep the object center in the camera's horizontal field of view.
    let p = cfg.camera.project([b.center[0], b.center[1], b.center[2]]);
    corners_ok && p.visible
}

fn place_objects(cfg: &SceneConfig, rng: &mut ChaCha8Rng, count: usize) -> Vec<Box3D> {
    let g = &cfg.grid;
    let mut placed: Vec<Box3D> = Vec::with_capacity(count);
    for _ in 0..count {
        let cls = rng.random_range(0..cfg.classes.len());
        let prof = &cfg.classes[cls];
        let dims: [f64; 3] = std::array::from_fn(|k| normal(rng, prof.dims_mean[k], prof.dims_std[k]).max(0.5 * prof.dims_mean[k]));
        for _ in 0..PLACEMENT_RETRIES {
            let x = rng.random_range(cfg.min_range..g.x_range.1);
            let y = rng.random_range(g.y_range.0..g.y_range.1);
            let yaw = rng.random_range(-PI..PI);
            let b = Box3D::new([x, y, dims[2] / 2.0], dims, yaw, cls);
            if !fits(cfg, &b) {
                continue;
            }
            let grown = |o: &Box3D| Box3D::new(o.center, [o.dims[0] + PLACEMENT_GAP, o.dims[1] + PLACEMENT_GAP, o.dims[2]], o.yaw, o.class_id);
            if placed.iter().all(|o| bev_intersection(&grown(o), &grown(&b)) == 0.0) {
                placed.push(b);
                break;
            }
        }
    }
    placed
}

/// Side faces of `b` as `(corner a, corner b, outward normal)` in BEV.
fn side_faces(b: &Box3D) -> [([f64; 2], [f64; 2], [f64; 2]); 4] {
    let c = b.bev_corners();
    std::array::from_fn(|i| {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
        let n = ex.hypot(ey);
        // Counter-clockwise corners: the outward normal is the edge turned clockwise.
        (p, q, [ey / n, -ex / n])
    })
}

struct Return {
    xyz: [f64; 3],
    rcs: f64,
    velocity: [f64; 2],
}

/// Returns sampled on the radar-facing side faces of `b`.
fn object_returns(cfg: &SceneConfig, rng: &mut ChaCha8Rng, b: &Box3D, prof: &ClassProfile, velocity: [f64; 2]) -> Vec<Return> {
    let faces = side_faces(b);
    let weights: Vec<f64> = faces
        .iter()
        .map(|(p, q, n)| {
            let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
            let len = (q[0] - p[0]).hypot(q[1] - p[1]);
            let d = mid[0].hypot(mid[1]);
            // Facing the radar at the ego origin: normal points back toward it.
            let facing = -(n[0] * mid[0] + n[1] * mid[1]) / d;
            if facing > 0.0 {
                facing * len
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let n = rng.random_range(cfg.points_per_object.0..=cfg.points_per_object.1);
    let (bottom, top) = (b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pick = rng.random_range(0.0..total);
        let (mut f, mut acc) = (0, weights[0]);
        while pick >= acc && f < 3 {
            f += 1;
            acc += weights[f];
        }
        if weights[f] == 0.0 {
            f = weights.iter().rposition(|&w| w > 0.0).expect("some face is visible");
        }
        let (p, q, nrm) = faces[f];
        let t = rng.random_range(0.0..1.0);
        let z = rng.random_range(bottom..top);
        let j = if cfg.surface_jitter > 0.0 { rng.random_range(-cfg.surface_jitter..cfg.surface_jitter) } else { 0.0 };
        let x = p[0] + t * (q[0] - p[0]) + j * nrm[0];
        let y = p[1] + t * (q[1] - p[1]) + j * nrm[1];
        let rcs = normal(rng, prof.rcs_mean_dbsm, prof.rcs_std_dbsm);
        let keep = rng.random_range(0.0..1.0) >= cfg.dropout;
        if keep {
            out.push(Return { xyz: [x, y, z], rcs, velocity });
        }
    }
    out
}

fn clutter_returns(cfg: &SceneConfig, rng: &mut ChaCha8Rng, boxes: &[Box3D], object_points: usize) -> Vec<Return> {
    let n = ((cfg.clutter_fraction * object_points as f64).round() as usize).max(cfg.min_clutter);
    let g = &cfg.grid;
    let mut out = Vec::with_capacity(n);
    let mut tries = 0;
    while out.len() < n && tries < 50 * n {
        tries += 1;
        let p = [rng.random_range(2.0f64.max(g.x_range.0)..g.x_range.1), rng.random_range(g.y_range.0..g.y_range.1), rng.random_range(0.0..0.2)];
        if boxes.iter().any(|b| b.contains(p, 0.3)) {
            continue;
        }
        let rcs = normal(rng, cfg.clutter_rcs_mean_dbsm, cfg.clutter_rcs_std_dbsm);
        out.push(Return { xyz: p, rcs, velocity: [0.0, 0.0] });
    }
    out
}

/// Encode returns into the schema's extra channels. Channels are filled by
/// name so any schema ordering is honored.
fn build_cloud(cfg: &SceneConfig, returns: &[Return]) -> Result<RadarPointCloud> {
    let schema = &cfg.schema;
    let mut xyz = Vec::with_capacity(returns.len());
    let mut extras = Vec::with_capacity(returns.len() * schema.num_extras());
    for r in returns {
        let p32 = [r.xyz[0] as f32, r.xyz[1] as f32, r.xyz[2] as f32];
        // Derived channels use the stored coordinates so they stay consistent.
        let p = [p32[0] as f64, p32[1] as f64, p32[2] as f64];
        let range = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let los = [p[0] / range, p[1] / range];
        let v_comp = r.velocity[0] * los[0] + r.velocity[1] * los[1];
        xyz.push(p32);
        for ch in &schema.extra_channels {
            let v = match ch.name.as_str() {
                "rcs" => r.rcs,
                "v_r_comp" => v_comp,
                "v_r" => v_comp - cfg.ego_speed * los[0],
                "time" => 0.0,
                "range" => range,
                "alpha" => p[1].atan2(p[0]),
                "beta" => p[2].atan2(p[0].hypot(p[1])),
                other => return Err(Error::config(format!("synthetic radar cannot simulate channel `{other}`"))),
            };
            extras.push(v as f32);
        }
    }
    RadarPointCloud::new(xyz, extras, schema.clone())
}

/// Generate one frame. Everything is a pure function of `(cfg, frame_seed)`.
pub fn generate_frame(cfg: &SceneConfig, frame_seed: u64, id: impl Into<String>) -> Result<Frame> {
    cfg.validate()?;
    let mut rng = rng_for(frame_seed, &[0x5CE4E]);
    let requested = rng.random_range(cfg.objects_per_frame.0..=cfg.objects_per_frame.1);
    let gt = place_objects(cfg, &mut rng, requested);
    let velocities: Vec<[f64; 2]> = gt
        .iter()
        .map(|b| {
            let prof = &cfg.classes[b.class_id];
            let moving = rng.random_range(0.0..1.0) >= cfg.static_fraction && prof.max_speed > 0.0;
            let speed = if moving { rng.random_range(0.0..prof.max_speed) } else { 0.0 };
            [speed * b.yaw.cos(), speed * b.yaw.sin()]
        })
        .collect();
    let mut returns = Vec::new();
    for (b, v) in gt.iter().zip(&velocities) {
        returns.extend(object_returns(cfg, &mut rng, b, &cfg.classes[b.class_id], *v));
    }
    let object_points = returns.len();
    returns.extend(clutter_returns(cfg, &mut rng, &gt, object_points));
    let radar = build_cloud(cfg, &returns)?;
    let colors: Vec<[f32; 3]> = cfg.classes.iter().map(|c| c.color).collect();
    let image = render_scene(&cfg.camera, &gt, &colors);
    if gt.len() < requested {
        log::debug!("frame seed {frame_seed}: placed {} of {requested} objects", gt.len());
    }
    let meta = FrameMeta { seed: frame_seed, requested_objects: requested, placed_objects: gt.len(), velocities };
    Ok(Frame { id: id.into(), image, radar, gt, camera: cfg.camera.clone(), meta })
}

/// Frame ids are zero-padded indices.
pub fn frame_id(index: usize) -> String {
    format!("{index:06}")
}

/// `count` frames with per-frame seeds derived from `cfg.seed`.
pub fn generate_frames(cfg: &SceneConfig, count: usize) -> Result<Vec<Frame>> {
    use rayon::prelude::*;
    cfg.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_frame(cfg, crate::seed::derive_seed(cfg.seed, &[i as u64]), frame_id(i)))
        .collect()
}
