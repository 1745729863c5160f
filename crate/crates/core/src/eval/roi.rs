use serde::{Deserialize, Serialize};

use crate::detection::Box3D;
use crate::error::{Error, Result};
use crate::geometry::CameraModel;

/// Evaluation corridor in camera coordinates: `x` lateral, `z` forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub lateral: (f64, f64),
    pub max_forward: f64,
}

impl Roi {
    /// The View-of-Delft driving corridor: `-4 <= x <= 4`, `z <= 25`.
    pub fn vod_corridor() -> Self {
        Self { lateral: (-4.0, 4.0), max_forward: 25.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lateral.0 <= self.lateral.1 && self.max_forward.is_finite() && self.lateral.0.is_finite() && self.lateral.1.is_finite()) {
            return Err(Error::config("RoI needs finite bounds with lateral min <= max"));
        }
        Ok(())
    }

    pub fn contains(&self, b: &Box3D, camera: &CameraModel) -> bool {
        let c = camera.ego_to_camera(b.center);
        self.lateral.0 <= c[0] && c[0] <= self.lateral.1 && c[2] <= self.max_forward
    }
}

/// Boxes whose center lies inside the corridor.
pub fn roi_filter(boxes: &[Box3D], roi: &Roi, camera: &CameraModel) -> Vec<Box3D> {
    boxes.iter().filter(|b| roi.contains(b, camera)).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::forward_looking(96.0, (128, 192), 1.5).unwrap()
    }

    fn at(forward: f64, left: f64) -> Box3D {
        Box3D::new([forward, left, 0.8], [1.0, 1.0, 1.6], 0.0, 0)
    }

    #[test]
    fn corridor_examples() {
        let roi = Roi::vod_corridor();
        assert!(roi.contains(&at(10.0, 0.0), &cam()));
        // Lateral 6 m to either side.
        assert!(!roi.contains(&at(10.0, 6.0), &cam()));
        assert!(!roi.contains(&at(10.0, -6.0), &cam()));
        assert!(!roi.contains(&at(26.0, 0.0), &cam()));
        assert!(roi.contains(&at(25.0, 4.0), &cam()));
    }

    #[test]
    fn filter_equals_predicate_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let boxes: Vec<Box3D> = (0..1000).map(|_| at(rng.random_range(-5.0..40.0), rng.random_range(-10.0..10.0))).collect();
        let roi = Roi::vod_corridor();
        let got = roi_filter(&boxes, &roi, &cam());
        // Camera sits on the ego x axis, so camera x = -ego y and z = ego x.
        let mut want = Vec::new();
        for b in &boxes {
            let (lat, fwd) = (-b.center[1], b.center[0]);
            if (-4.0..=4.0).contains(&lat) && fwd <= 25.0 {
                want.push(*b);
            }
        }
        assert_eq!(got, want);
    }
}
