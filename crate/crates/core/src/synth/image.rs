use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Channel-first RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    /// `[3, height, width]`, row-major.
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn filled(size: (usize, usize), rgb: [f32; 3]) -> Self {
        let (h, w) = size;
        let mut data = Vec::with_capacity(3 * h * w);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, h * w));
        }
        Self { height: h, width: w, data }
    }

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::InvalidInput(format!("image data has {} values, expected 3 x {height} x {width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set_rgb(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let n = self.height * self.width;
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * n + y * self.width + x] = v;
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.height, self.width], self.data.iter().map(|&v| v as f64).collect())
    }

    /// Bilinear resize with pixel centers at `k + 0.5`.
    pub fn resized(&self, size: (usize, usize)) -> Self {
        let (h, w) = size;
        if size == self.size() {
            return self.clone();
        }
        let (sy, sx) = (self.height as f64 / h as f64, self.width as f64 / w as f64);
        let src = |o: usize, s: f64, n: usize| {
            let p = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (n - 1) as f64);
            let i = (p.floor() as usize).min(n - 1);
            let j = (i + 1).min(n - 1);
            (i, j, p - i as f64)
        };
        let mut data = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            let (y0, y1, fy) = src(y, sy, self.height);
            for x in 0..w {
                let (x0, x1, fx) = src(x, sx, self.width);
                for c in 0..3 {
                    let v = |yy, xx| self.get(c, yy, xx) as f64;
                    let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
                    let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
                    data[(c * h + y) * w + x] = (top * (1.0 - fy) + bot * fy) as f32;
                }
            }
        }
        Self { height: h, width: w, data }
    }
}
