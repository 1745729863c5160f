use super::image::Image;
use crate::detection::Box3D;
use crate::geometry::CameraModel;

const SKY: [f32; 3] = [0.55, 0.7, 0.9];
const GROUND_NEAR: [f32; 3] = [0.45, 0.42, 0.38];
const GROUND_FAR: [f32; 3] = [0.3, 0.3, 0.3];
/// Direction toward the light in the ego frame (unnormalized).
const LIGHT: [f64; 3] = [-0.4, 0.5, 0.8];

/// Camera position in the ego frame.
fn camera_center(cam: &CameraModel) -> [f64; 3] {
    cam.camera_to_ego([0.0, 0.0, 0.0])
}

fn background(cam: &CameraModel) -> Image {
    let (h, w) = cam.image_size;
    let mut img = Image::filled((h, w), SKY);
    let c = camera_center(cam);
    for y in 0..h {
        // Ground hit of the ray through this row's pixel centers.
        let p = cam.unproject(w as f64 / 2.0, y as f64 + 0.5, 1.0);
        let dz = p[2] - c[2];
        if dz >= 0.0 {
            continue;
        }
        let t = -c[2] / dz;
        let dist = ((p[0] - c[0]) * t).hypot((p[1] - c[1]) * t);
        let a = (-dist / 12.0).exp() as f32;
        let rgb: [f32; 3] = std::array::from_fn(|k| GROUND_FAR[k] + a * (GROUND_NEAR[k] - GROUND_FAR[k]));
        for x in 0..w {
            img.set_rgb(y, x, rgb);
        }
    }
    img
}

/// The six faces of `b` as corner loops with their outward normals.
fn faces(b: &Box3D) -> Vec<([[f64; 3]; 4], [f64; 3])> {
    let c = b.bev_corners();
    let (z0, z1) = (b.center[2] - b.dims[2] / 2.0, b.center[2] + b.dims[2] / 2.0);
    let mut out = Vec::with_capacity(6);
    for i in 0..4 {
        let (p, q) = (c[i], c[(i + 1) % 4]);
        let (ex, ey) = (q[0] - p[0], q[1] - p[1]);
        let n = ex.hypot(ey);
        out.push(([[p[0], p[1], z0], [q[0], q[1], z0], [q[0], q[1], z1], [p[0], p[1], z1]], [ey / n, -ex / n, 0.0]));
    }
    out.push((std::array::from_fn(|i| [c[i][0], c[i][1], z1]), [0.0, 0.0, 1.0]));
    out.push((std::array::from_fn(|i| [c[3 - i][0], c[3 - i][1], z0]), [0.0, 0.0, -1.0]));
    out
}

/// Fill the convex polygon `poly` (pixel coordinates) by testing pixel centers.
fn fill_convex(img: &mut Image, poly: &[[f64; 2]], rgb: [f32; 3]) {
    let (h, w) = (img.height as f64, img.width as f64);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in poly {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let xs = (x0 - 0.5).ceil().max(0.0) as usize;
    let xe = ((x1 - 0.5).floor() + 1.0).clamp(0.0, w) as usize;
    let ys = (y0 - 0.5).ceil().max(0.0) as usize;
    let ye = ((y1 - 0.5).floor() + 1.0).clamp(0.0, h) as usize;
    let n = poly.len();
    for y in ys..ye {
        let py = y as f64 + 0.5;
        for x in xs..xe {
            let px = x as f64 + 0.5;
            let (mut pos, mut neg) = (false, false);
            for i in 0..n {
                let (a, b) = (poly[i], poly[(i + 1) % n]);
                let cr = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0]);
                pos |= cr > 0.0;
                neg |= cr < 0.0;
            }
            if !(pos && neg) {
                img.set_rgb(y, x, rgb);
            }
        }
    }
}

/// Flat-shaded perspective rendering of `boxes` over a ground plane, drawn
/// far to near. Boxes must lie in front of the camera.
pub fn render_scene(cam: &CameraModel, boxes: &[Box3D], colors: &[[f32; 3]]) -> Image {
    let mut img = background(cam);
    let eye = camera_center(cam);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    let dist = |b: &Box3D| (b.center[0] - eye[0]).hypot(b.center[1] - eye[1]);
    order.sort_by(|&a, &b| dist(&boxes[b]).total_cmp(&dist(&boxes[a])).then(a.cmp(&b)));
    let ln = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
    for i in order {
        let b = &boxes[i];
        let base = colors[b.class_id % colors.len()];
        for (corners, n) in faces(b) {
            let mid: [f64; 3] = std::array::from_fn(|k| corners.iter().map(|c| c[k]).sum::<f64>() / 4.0);
            let view: f64 = (0..3).map(|k| n[k] * (mid[k] - eye[k])).sum();
            if view >= 0.0 {
                continue;
            }
            let poly: Option<Vec<[f64; 2]>> = corners
                .iter()
                .map(|&c| {
                    let p = cam.project(c);
                    (p.depth > 1e-3).then_some([p.u, p.v])
                })
                .collect();
            let Some(poly) = poly else { continue };
            let lambert = ((0..3).map(|k| n[k] * LIGHT[k]).sum::<f64>() / ln).max(0.0);
            let shade = (0.55 + 0.45 * lambert) as f32;
            fill_convex(&mut img, &poly, base.map(|c| (c * shade).clamp(0.0, 1.0)));
        }
    }
    img
}
