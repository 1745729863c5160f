use crate::error::{Error, Result};
use crate::geometry::CameraModel;
use crate::nn::Tensor;
use crate::radar::RadarPointCloud;

/// Sparse radar evidence at feature resolution: channel 0 holds the metric
/// depth of the nearest projected point, channels `1..=N` its raw extras.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarDepthMap {
    /// `[N + 1, h, w]`.
    pub channels: Tensor,
    /// Row-major `h * w` occupancy.
    pub mask: Vec<bool>,
}

impl RadarDepthMap {
    pub fn num_extras(&self) -> usize {
        self.channels.shape()[0] - 1
    }

    pub fn feature_size(&self) -> (usize, usize) {
        let (_, h, w) = self.channels.dims3();
        (h, w)
    }

    pub fn occupied(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f64 {
        self.channels.at3(0, row, col)
    }
}

/// Project `cloud` and keep, per feature pixel, the visible point with the
/// smallest depth. `channels` selects the extras written after the depth.
/// Exact depth ties keep the earlier point.
pub fn build_radar_depth_map(cloud: &RadarPointCloud, camera: &CameraModel, feature_size: (usize, usize), stride: usize, channels: &[usize]) -> Result<RadarDepthMap> {
    let (h, w) = feature_size;
    if camera.image_size != (h * stride, w * stride) {
        return Err(Error::config(format!(
            "camera image size {:?} does not match feature size {h}x{w} at stride {stride}",
            camera.image_size
        )));
    }
    if let Some(&c) = channels.iter().find(|&&c| c >= cloud.schema.num_extras()) {
        return Err(Error::config(format!("extra channel {c} out of range for schema `{}`", cloud.schema.name)));
    }
    let mut best: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for i in 0..cloud.len() {
        let p = camera.project(cloud.point(i));
        if !p.visible {
            continue;
        }
        let (r, c) = ((p.v / stride as f64) as usize, (p.u / stride as f64) as usize);
        let slot = &mut best[r * w + c];
        if slot.is_none_or(|(d, _)| p.depth < d) {
            *slot = Some((p.depth, i));
        }
    }
    let n = channels.len();
    let mut t = Tensor::zeros(&[n + 1, h, w]);
    let plane = h * w;
    let data = t.data_mut();
    let mut mask = vec![false; plane];
    for (pix, b) in best.iter().enumerate() {
        if let Some((d, i)) = *b {
            mask[pix] = true;
            data[pix] = d;
            for (k, &ch) in channels.iter().enumerate() {
                data[(k + 1) * plane + pix] = cloud.extra(i, ch);
            }
        }
    }
    Ok(RadarDepthMap { channels: t, mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::RadarSchema;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn camera() -> CameraModel {
        CameraModel::forward_looking(100.0, (64, 96), 1.0).unwrap()
    }

    /// Ego point that projects to pixel `(u, v)` at camera depth `d`.
    fn at_pixel(cam: &CameraModel, u: f64, v: f64, d: f64) -> [f32; 3] {
        let p = cam.unproject(u, v, d);
        [p[0] as f32, p[1] as f32, p[2] as f32]
    }

    #[test]
    fn single_point_lands_with_its_extras() {
        let cam = camera();
        let p = at_pixel(&cam, 20.5, 12.5, 12.5);
        let cloud = RadarPointCloud::new(vec![p], vec![4.0, 1.0, 2.0, 0.0], RadarSchema::vod()).unwrap();
        let m = build_radar_depth_map(&cloud, &cam, (8, 12), 8, &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.occupied(), 1);
        assert!(m.mask[12 + 2]);
        assert!((m.depth_at(1, 2) - 12.5).abs() < 1e-4);
        assert_eq!(m.channels.at3(1, 1, 2), 4.0);
    }

    #[test]
    fn nearest_point_wins_collisions() {
        let cam = camera();
        let far = at_pixel(&cam, 20.5, 12.5, 20.0);
        let near = at_pixel(&cam, 21.5, 13.5, 8.0);
        let cloud = RadarPointCloud::new(vec![far, near], vec![-5.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0], RadarSchema::vod()).unwrap();
        let m = build_radar_depth_map(&cloud, &cam, (8, 12), 8, &[0]).unwrap();
        assert_eq!(m.num_extras(), 1);
        assert!((m.depth_at(1, 2) - 8.0).abs() < 1e-4);
        assert_eq!(m.channels.at3(1, 1, 2), 7.0);
    }

    #[test]
    fn occupancy_matches_projection_loop() {
        let cam = camera();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<[f32; 3]> = (0..300)
            .map(|_| [rng.random_range(-2.0..30.0), rng.random_range(-15.0..15.0), rng.random_range(-1.0..3.0)])
            .collect();
        let extras = (0..1200).map(|_| rng.random_range(-10.0..10.0)).collect();
        let cloud = RadarPointCloud::new(pts.clone(), extras, RadarSchema::vod()).unwrap();
        let m = build_radar_depth_map(&cloud, &cam, (8, 12), 8, &[0, 1, 2, 3]).unwrap();
        // Oracle: per-pixel minimum depth by direct search.
        let mut mins = vec![f64::INFINITY; 96];
        let mut visible = 0;
        for p in &pts {
            let pr = cam.project([p[0] as f64, p[1] as f64, p[2] as f64]);
            if pr.visible {
                visible += 1;
                let pix = (pr.v / 8.0).floor() as usize * 12 + (pr.u / 8.0).floor() as usize;
                mins[pix] = mins[pix].min(pr.depth);
            }
        }
        let occupied = mins.iter().filter(|d| d.is_finite()).count();
        assert_eq!(m.occupied(), occupied);
        assert!(occupied <= visible);
        for (pix, d) in mins.iter().enumerate() {
            let got = m.channels.data()[pix];
            if d.is_finite() {
                assert_eq!(got, *d);
            } else {
                assert_eq!(got, 0.0);
                assert!((1..5).all(|c| m.channels.data()[c * 96 + pix] == 0.0));
            }
        }
    }

    #[test]
    fn empty_cloud_and_size_mismatch() {
        let cam = camera();
        let m = build_radar_depth_map(&RadarPointCloud::empty(RadarSchema::tj4d()), &cam, (8, 12), 8, &[0, 1]).unwrap();
        assert_eq!(m.occupied(), 0);
        assert!(m.channels.data().iter().all(|&v| v == 0.0));
        assert!(build_radar_depth_map(&RadarPointCloud::empty(RadarSchema::tj4d()), &cam, (8, 11), 8, &[0]).is_err());
    }
}
