use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// `val - floor(val / period + offset) * period`, the usual yaw folding helper.
pub fn limit_period(val: f64, offset: f64, period: f64) -> f64 {
    val - (val / period + offset).floor() * period
}

/// Oriented box in the ego frame. `dims` are `(l, w, h)` with `l` along the
/// heading; `center.z` is the geometric center.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
    /// Confidence for predictions, 1 for ground truth.
    pub score: f64,
}

impl Box3D {
    pub fn new(center: [f64; 3], dims: [f64; 3], yaw: f64, class_id: usize) -> Self {
        Self { center, dims, yaw: wrap_angle(yaw), class_id, score: 1.0 }
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let finite = self.center.iter().chain(&self.dims).chain([&self.yaw, &self.score]).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("box has non-finite values".into()));
        }
        if self.dims.iter().any(|&d| d <= 0.0) {
            return Err(Error::InvalidInput(format!("box dims must be positive, got {:?}", self.dims)));
        }
        if !(self.yaw > -PI && self.yaw <= PI) {
            return Err(Error::InvalidInput(format!("yaw {} outside (-pi, pi]", self.yaw)));
        }
        if self.class_id >= num_classes {
            return Err(Error::InvalidInput(format!("class id {} out of {num_classes} classes", self.class_id)));
        }
        Ok(())
    }

    /// BEV corners, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.dims[0] / 2.0, self.dims[1] / 2.0);
        let [x, y, _] = self.center;
        [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]].map(|[a, b]| [x + a * c - b * s, y + a * s + b * c])
    }

    pub fn bev_area(&self) -> f64 {
        self.dims[0] * self.dims[1]
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Is `p` inside the box grown by `margin` on every side?
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let lx = dx * c + dy * s;
        let ly = -dx * s + dy * c;
        let lz = p[2] - self.center[2];
        lx.abs() <= self.dims[0] / 2.0 + margin && ly.abs() <= self.dims[1] / 2.0 + margin && lz.abs() <= self.dims[2] / 2.0 + margin
    }
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(p: &[[f64; 2]]) -> f64 {
    let n = p.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (p[i], p[(i + 1) % n]);
        s += a[0] * b[1] - a[1] * b[0];
    }
    s.abs() / 2.0
}

/// Clip `subject` by every edge of the convex counter-clockwise `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (cp, cq) = (cross(a, b, p), cross(a, b, q));
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

fn key(b: &Box3D) -> [f64; 5] {
    [b.center[0], b.center[1], b.dims[0], b.dims[1], b.yaw]
}

/// Intersection area of the two BEV rectangles.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    // Fixed argument order keeps the result exactly symmetric.
    let (a, b) = if key(a).iter().zip(&key(b)).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Greater) {
        (b, a)
    } else {
        (a, b)
    };
    let ra = 0.5 * a.dims[0].hypot(a.dims[1]);
    let rb = 0.5 * b.dims[0].hypot(b.dims[1]);
    if (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]) > ra + rb {
        return 0.0;
    }
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners()))
}

/// Rotated BEV IoU in `[0, 1]`; zero-area boxes give 0.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let (aa, ab) = (a.bev_area(), b.bev_area());
    if !(aa > 0.0 && ab > 0.0) {
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = aa + ab - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU of two z-aligned oriented boxes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if !(va > 0.0 && vb > 0.0) {
        return 0.0;
    }
    let top = (a.center[2] + a.dims[2] / 2.0).min(b.center[2] + b.dims[2] / 2.0);
    let bottom = (a.center[2] - a.dims[2] / 2.0).max(b.center[2] - b.dims[2] / 2.0);
    let h = (top - bottom).max(0.0);
    let inter = bev_intersection(a, b) * h;
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rasterized IoU: exact overlap of each fine column with both rectangles.
    fn raster_iou(a: &Box3D, b: &Box3D, cols: usize) -> f64 {
        let xs: Vec<f64> = a.bev_corners().iter().chain(&b.bev_corners()).map(|c| c[0]).collect();
        let (x0, x1) = (xs.iter().cloned().fold(f64::INFINITY, f64::min), xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        let dx = (x1 - x0) / cols as f64;
        // y-interval of a convex polygon at abscissa x.
        let span = |p: &[[f64; 2]; 4], x: f64| -> Option<(f64, f64)> {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for i in 0..4 {
                let (u, v) = (p[i], p[(i + 1) % 4]);
                if (u[0] - x) * (v[0] - x) <= 0.0 && u[0] != v[0] {
                    let y = u[1] + (x - u[0]) / (v[0] - u[0]) * (v[1] - u[1]);
                    lo = lo.min(y);
                    hi = hi.max(y);
                }
            }
            (hi >= lo).then_some((lo, hi))
        };
        let (pa, pb) = (a.bev_corners(), b.bev_corners());
        let mut inter = 0.0;
        for k in 0..cols {
            let x = x0 + (k as f64 + 0.5) * dx;
            if let (Some(sa), Some(sb)) = (span(&pa, x), span(&pb, x)) {
                inter += (sa.1.min(sb.1) - sa.0.max(sb.0)).max(0.0) * dx;
            }
        }
        inter / (a.bev_area() + b.bev_area() - inter)
    }

    fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
        Box3D::new(
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-0.5..0.5)],
            [rng.random_range(0.3..4.0), rng.random_range(0.3..2.5), rng.random_range(0.5..2.0)],
            rng.random_range(-PI..PI),
            0,
        )
    }

    #[test]
    fn identical_and_offset_squares() {
        let a = Box3D::new([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert!((bev_iou(&a, &a) - 1.0).abs() < 1e-12);
        let b = Box3D::new([0.5, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0);
        assert!((bev_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        assert!((raster_iou(&a, &b, 4000) - 1.0 / 3.0).abs() < 1e-3);
        let c = Box3D::new([5.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.3, 0);
        assert_eq!(bev_iou(&a, &c), 0.0);
        let mut flat = a;
        flat.dims[1] = 0.0;
        assert_eq!(bev_iou(&a, &flat), 0.0);
    }

    #[test]
    fn rotated_pairs_match_rasterization() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let (a, b) = (random_box(&mut rng), random_box(&mut rng));
            let exact = bev_iou(&a, &b);
            assert!((exact - raster_iou(&a, &b, 3000)).abs() < 1e-3);
            assert_eq!(exact, bev_iou(&b, &a));
        }
    }

    #[test]
    fn iou_3d_stacks_height_overlap() {
        let a = Box3D::new([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, 0);
        let b = Box3D::new([0.0, 0.0, 1.0], [2.0, 2.0, 2.0], 0.0, 0);
        assert!((iou_3d(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn containment_with_margin() {
        let b = Box3D::new([1.0, 1.0, 0.5], [4.0, 2.0, 1.0], PI / 2.0, 0);
        assert!(b.contains([1.0, 2.9, 0.5], 0.0));
        assert!(!b.contains([2.9, 1.0, 0.5], 0.0));
        assert!(b.contains([2.05, 1.0, 0.5], 0.1));
    }

    proptest! {
        #[test]
        fn wrap_stays_in_half_open_interval(a in -100.0f64..100.0) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(((a - w) / (2.0 * PI) - ((a - w) / (2.0 * PI)).round()).abs() < 1e-9);
        }

        #[test]
        fn iou_is_bounded_and_symmetric(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_box(&mut rng), random_box(&mut rng));
            let i = bev_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert_eq!(i, bev_iou(&b, &a));
            prop_assert_eq!(iou_3d(&a, &b), iou_3d(&b, &a));
        }
    }
}
