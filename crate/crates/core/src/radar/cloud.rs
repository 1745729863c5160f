use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One per-point radar channel beyond xyz. Values are normalized before
/// entering a network as `(v - norm_shift) / norm_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarChannel {
    pub name: String,
    pub unit: String,
    pub norm_shift: f64,
    pub norm_scale: f64,
}

impl RadarChannel {
    fn new(name: &str, unit: &str, norm_shift: f64, norm_scale: f64) -> Self {
        Self { name: name.into(), unit: unit.into(), norm_shift, norm_scale }
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.norm_shift) / self.norm_scale
    }
}

/// Ordered extra channels carried by a radar sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarSchema {
    pub name: String,
    pub extra_channels: Vec<RadarChannel>,
}

impl RadarSchema {
    pub fn new(name: impl Into<String>, extra_channels: Vec<RadarChannel>) -> Result<Self> {
        let s = Self { name: name.into(), extra_channels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.extra_channels.is_empty() {
            return Err(Error::InvalidInput(format!("schema `{}` has no extra channels", self.name)));
        }
        for (i, c) in self.extra_channels.iter().enumerate() {
            if self.extra_channels[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::InvalidInput(format!("duplicate channel `{}` in schema `{}`", c.name, self.name)));
            }
            if !(c.norm_scale > 0.0) {
                return Err(Error::InvalidInput(format!("channel `{}` needs a positive norm scale", c.name)));
            }
        }
        Ok(())
    }

    /// View-of-Delft radar: RCS, relative and absolute radial velocity, time.
    pub fn vod() -> Self {
        Self {
            name: "vod".into(),
            extra_channels: vec![
                RadarChannel::new("rcs", "dBsm", 0.0, 10.0),
                RadarChannel::new("v_r", "m/s", 0.0, 5.0),
                RadarChannel::new("v_r_comp", "m/s", 0.0, 5.0),
                RadarChannel::new("time", "s", 0.0, 1.0),
            ],
        }
    }

    /// TJ4D radar: range, RCS, horizontal and vertical angle.
    pub fn tj4d() -> Self {
        Self {
            name: "tj4d".into(),
            extra_channels: vec![
                RadarChannel::new("range", "m", 25.0, 25.0),
                RadarChannel::new("rcs", "dBsm", 0.0, 10.0),
                RadarChannel::new("alpha", "rad", 0.0, 0.7),
                RadarChannel::new("beta", "rad", 0.0, 0.2),
            ],
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vod" => Ok(Self::vod()),
            "tj4d" => Ok(Self::tj4d()),
            other => Err(Error::config(format!("unknown radar schema `{other}` (expected vod or tj4d)"))),
        }
    }

    pub fn num_extras(&self) -> usize {
        self.extra_channels.len()
    }

    pub fn channel_index(&self, name: &str) -> Option<usize> {
        self.extra_channels.iter().position(|c| c.name == name)
    }

    /// Resolve a channel-name selection to indices; empty means all.
    pub fn select(&self, names: &[String]) -> Result<Vec<usize>> {
        if names.is_empty() {
            return Ok((0..self.num_extras()).collect());
        }
        names
            .iter()
            .map(|n| {
                self.channel_index(n)
                    .ok_or_else(|| Error::config(format!("schema `{}` has no channel `{n}`", self.name)))
            })
            .collect()
    }
}

/// Radar points in the ego frame. Stored as `f32`, matching the on-disk records.
#[derive(Clone, Debug, PartialEq)]
pub struct RadarPointCloud {
    pub xyz: Vec<[f32; 3]>,
    /// Row-major `(num_points, N)` in schema order.
    pub extras: Vec<f32>,
    pub schema: RadarSchema,
}

impl RadarPointCloud {
    pub fn new(xyz: Vec<[f32; 3]>, extras: Vec<f32>, schema: RadarSchema) -> Result<Self> {
        let c = Self { xyz, extras, schema };
        c.validate()?;
        Ok(c)
    }

    pub fn empty(schema: RadarSchema) -> Self {
        Self { xyz: Vec::new(), extras: Vec::new(), schema }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.extras.len() != self.xyz.len() * self.schema.num_extras() {
            return Err(Error::InvalidInput(format!(
                "{} extras for {} points with {} channels",
                self.extras.len(),
                self.xyz.len(),
                self.schema.num_extras()
            )));
        }
        if let Some(i) = self.xyz.iter().flatten().chain(&self.extras).position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite radar value at flat index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.xyz[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn points_f64(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    pub fn extra(&self, i: usize, channel: usize) -> f64 {
        self.extras[i * self.schema.num_extras() + channel] as f64
    }

    pub fn extras_row(&self, i: usize) -> &[f32] {
        let n = self.schema.num_extras();
        &self.extras[i * n..(i + 1) * n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_sensor_tables() {
        let vod = RadarSchema::vod();
        let names: Vec<_> = vod.extra_channels.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["rcs", "v_r", "v_r_comp", "time"]);
        let tj = RadarSchema::tj4d();
        let names: Vec<_> = tj.extra_channels.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["range", "rcs", "alpha", "beta"]);
        assert_eq!(vod.num_extras(), 4);
        assert_eq!(tj.num_extras(), 4);
    }

    #[test]
    fn schema_rejects_duplicates_and_empty() {
        let mut s = RadarSchema::vod();
        s.extra_channels[1].name = "rcs".into();
        assert!(s.validate().is_err());
        assert!(RadarSchema::new("x", vec![]).is_err());
    }

    #[test]
    fn selection_by_name() {
        let s = RadarSchema::vod();
        assert_eq!(s.select(&["rcs".into()]).unwrap(), vec![0]);
        assert_eq!(s.select(&[]).unwrap(), vec![0, 1, 2, 3]);
        assert!(s.select(&["nope".into()]).is_err());
    }

    #[test]
    fn cloud_validates_width_and_finiteness() {
        let s = RadarSchema::vod();
        assert!(RadarPointCloud::new(vec![[0.0; 3]], vec![0.0; 3], s.clone()).is_err());
        assert!(RadarPointCloud::new(vec![[0.0, f32::NAN, 0.0]], vec![0.0; 4], s.clone()).is_err());
        assert!(RadarPointCloud::new(vec![[1.0, 2.0, 0.0]], vec![0.0; 4], s).is_ok());
    }
}
