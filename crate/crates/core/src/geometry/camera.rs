use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole camera: intrinsics in pixels, extrinsics mapping the ego/radar
/// frame (x forward, y left, z up) into the camera frame (x right, y down,
/// z forward). Pixel `k` spans `[k, k + 1)` along its axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 4],
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
}

/// One projected point. `u`, `v` are meaningful only when `depth > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub visible: bool,
}

/// Rotation taking ego axes to camera axes: cam_x = -ego_y, cam_y = -ego_z, cam_z = ego_x.
pub const EGO_TO_CAMERA_AXES: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];

impl CameraModel {
    pub fn new(intrinsics: [[f64; 3]; 3], extrinsics: [[f64; 4]; 4], image_size: (usize, usize)) -> Result<Self> {
        let cam = Self { intrinsics, extrinsics, image_size };
        cam.validate()?;
        Ok(cam)
    }

    /// Forward-looking camera at `mount_height` above the ego origin with the
    /// principal point at the image center.
    pub fn forward_looking(focal: f64, image_size: (usize, usize), mount_height: f64) -> Result<Self> {
        let (h, w) = image_size;
        let k = [[focal, 0.0, w as f64 / 2.0], [0.0, focal, h as f64 / 2.0], [0.0, 0.0, 1.0]];
        let r = Matrix3::from_fn(|i, j| EGO_TO_CAMERA_AXES[i][j]);
        let t = -(r * Vector3::new(0.0, 0.0, mount_height));
        let mut e = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                e[i][j] = r[(i, j)];
            }
            e[i][3] = t[i];
        }
        e[3][3] = 1.0;
        Self::new(k, e, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        let finite = k.iter().flatten().chain(self.extrinsics.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("camera parameters must be finite".into()));
        }
        if k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput("intrinsics last row must be [0, 0, 1]".into()));
        }
        if k[0][0] <= 0.0 || k[1][1] <= 0.0 {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        if (r * r.transpose() - Matrix3::identity()).abs().max() > 1e-6 {
            return Err(Error::InvalidInput("extrinsic rotation is not orthonormal".into()));
        }
        if self.extrinsics[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidInput("extrinsics last row must be [0, 0, 0, 1]".into()));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::InvalidInput("image size must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.intrinsics[i][j])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.extrinsics[i][j])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.extrinsics[0][3], self.extrinsics[1][3], self.extrinsics[2][3])
    }

    pub fn extrinsic_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.extrinsics[i][j])
    }

    pub fn ego_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.extrinsic_matrix() * Vector4::new(p[0], p[1], p[2], 1.0);
        [q[0], q[1], q[2]]
    }

    pub fn camera_to_ego(&self, p: [f64; 3]) -> [f64; 3] {
        let q = self.rotation().transpose() * (Vector3::new(p[0], p[1], p[2]) - self.translation());
        [q[0], q[1], q[2]]
    }

    pub fn project(&self, p: [f64; 3]) -> Projection {
        let c = self.ego_to_camera(p);
        let depth = c[2];
        let uvw = self.k() * Vector3::new(c[0], c[1], c[2]);
        let (u, v) = (uvw[0] / depth, uvw[1] / depth);
        let (h, w) = self.image_size;
        let visible = depth > 0.0 && u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64;
        Projection { u, v, depth, visible }
    }

    /// Ego-frame point at camera-frame depth `depth` on the ray through `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let k = &self.intrinsics;
        // Upper-triangular K: solve for normalized coordinates directly.
        let yn = (v - k[1][2]) / k[1][1];
        let xn = (u - k[0][2] - k[0][1] * yn) / k[0][0];
        self.camera_to_ego([xn * depth, yn * depth, depth])
    }

    /// Camera for an image resized by `scale` (intrinsic rows 0 and 1 scale).
    pub fn scaled(&self, scale: f64, image_size: (usize, usize)) -> Self {
        let mut k = self.intrinsics;
        for row in k.iter_mut().take(2) {
            for v in row.iter_mut() {
                *v *= scale;
            }
        }
        Self { intrinsics: k, extrinsics: self.extrinsics, image_size }
    }

    /// Camera for the same view resampled to `image_size`, scaling each axis
    /// by its own size ratio.
    pub fn resized_to(&self, image_size: (usize, usize)) -> Self {
        let sy = image_size.0 as f64 / self.image_size.0 as f64;
        let sx = image_size.1 as f64 / self.image_size.1 as f64;
        let mut k = self.intrinsics;
        k[0].iter_mut().for_each(|v| *v *= sx);
        k[1].iter_mut().for_each(|v| *v *= sy);
        Self { intrinsics: k, extrinsics: self.extrinsics, image_size }
    }
}

/// Project every point; rejects non-finite coordinates.
pub fn project_to_image(points: &[[f64; 3]], camera: &CameraModel) -> Result<Vec<Projection>> {
    if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
    }
    Ok(points.iter().map(|&p| camera.project(p)).collect())
}
