use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEncoderSpec {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for ImageEncoderSpec {
    fn default() -> Self {
        Self { widths: vec![32, 64, 128, 128], strides: vec![2, 2, 2, 1] }
    }
}

impl ImageEncoderSpec {
    pub fn toy() -> Self {
        Self { widths: vec![16, 32, 32, 32], strides: vec![2, 2, 2, 1] }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().expect("non-empty encoder")
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::config("image encoder needs matching, non-empty widths and strides"));
        }
        if self.widths.contains(&0) || self.strides.contains(&0) {
            return Err(Error::config("image encoder widths and strides must be positive"));
        }
        Ok(())
    }

    /// Feature-map size for an `(H, W)` image.
    pub fn feature_size(&self, image_size: (usize, usize)) -> Result<(usize, usize)> {
        let s = self.total_stride();
        let (h, w) = image_size;
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("image size {h}x{w} is not divisible by encoder stride {s}")));
        }
        Ok((h / s, w / s))
    }
}

/// Plain strided conv3x3 + ReLU stages. Pixel intensities in `[0, 1]` are
/// centered by subtracting 0.5 before the first stage.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub spec: ImageEncoderSpec,
    convs: Vec<Conv2d>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: ImageEncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut c = 3;
        let convs = spec
            .widths
            .iter()
            .zip(&spec.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let conv = Conv2d::new(store, &format!("{name}.conv{i}"), c, w, 3, s);
                c = w;
                conv
            })
            .collect();
        Ok(Self { spec, convs })
    }

    /// `[3, H, W]` -> `[C_img, H / s, W / s]`.
    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let shape = g.shape(image).to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::InvalidInput(format!("expected a (3, H, W) image, got {shape:?}")));
        }
        self.spec.feature_size((shape[1], shape[2]))?;
        let mut h = g.add_const(image, &Tensor::full(&shape, -0.5));
        for conv in &self.convs {
            h = conv.forward(g, h);
            h = g.relu(h);
        }
        Ok(h)
    }
}
