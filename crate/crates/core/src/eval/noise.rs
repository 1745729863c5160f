use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Image;

/// Gaussian image corruption `I' = clamp(I + rho * g, 0, 1)`, `g ~ N(0, sigma^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub rho: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// Noise standard deviation in normalized pixel units.
pub const DEFAULT_SIGMA: f64 = 0.1;

impl NoiseSpec {
    pub fn new(rho: f64, sigma: f64, seed: u64) -> Result<Self> {
        let s = Self { rho, sigma, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!("noise level must be finite and >= 0, got {}", self.rho)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("noise sigma must be finite and > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// The additive term `rho * g` for `len` values, before clamping.
pub fn noise_field(len: usize, spec: &NoiseSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = Normal::new(0.0, spec.sigma).expect("sigma validated");
    Ok((0..len).map(|_| spec.rho * n.sample(&mut rng)).collect())
}

/// Corrupt every pixel of every channel. `rho = 0` returns the input unchanged.
pub fn inject_noise(image: &Image, spec: &NoiseSpec) -> Result<Image> {
    spec.validate()?;
    if spec.rho == 0.0 {
        return Ok(image.clone());
    }
    let field = noise_field(image.data.len(), spec)?;
    let data = image.data.iter().zip(&field).map(|(&v, &e)| (v as f64 + e).clamp(0.0, 1.0) as f32).collect();
    Ok(Image { height: image.height, width: image.width, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img() -> Image {
        let mut im = Image::filled((16, 24), [0.5, 0.2, 0.9]);
        im.set_rgb(3, 4, [0.0, 1.0, 0.25]);
        im
    }

    #[test]
    fn zero_rho_is_identity() {
        let im = img();
        let out = inject_noise(&im, &NoiseSpec::new(0.0, 0.1, 5).unwrap()).unwrap();
        assert_eq!(out, im);
    }

    #[test]
    fn negative_rho_and_sigma_are_rejected() {
        assert!(NoiseSpec::new(-0.1, 0.1, 0).is_err());
        assert!(NoiseSpec::new(0.5, 0.0, 0).is_err());
        let bad = NoiseSpec { rho: -1.0, sigma: 0.1, seed: 0 };
        assert!(inject_noise(&img(), &bad).is_err());
    }

    #[test]
    fn outputs_stay_in_range_and_seeds_reproduce() {
        let im = img();
        let s = NoiseSpec::new(0.9, 0.5, 1).unwrap();
        let a = inject_noise(&im, &s).unwrap();
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, inject_noise(&im, &s).unwrap());
        let b = inject_noise(&im, &NoiseSpec { seed: 2, ..s }).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn pre_clamp_statistics_at_a_million_samples() {
        for rho in [0.5, 0.7, 0.9] {
            let spec = NoiseSpec::new(rho, DEFAULT_SIGMA, 42).unwrap();
            let f = noise_field(1_000_000, &spec).unwrap();
            let n = f.len() as f64;
            let mean = f.iter().sum::<f64>() / n;
            let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!(mean.abs() < 1e-3, "rho {rho}: mean {mean}");
            assert!((std / (rho * DEFAULT_SIGMA) - 1.0).abs() < 0.01, "rho {rho}: std {std}");
        }
    }
}
