use serde::{Deserialize, Serialize};

use super::pillars::{PillarBatch, PillarFeatureNet};
use crate::error::Result;
use crate::geometry::BevGridSpec;
use crate::nn::{Graph, ParamStore, SecondFpn, SecondFpnConfig, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadarStreamConfig {
    pub pillar_channels: usize,
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    /// Per-stage neck width; BEV output has `up_width * stages` channels.
    pub up_width: usize,
}

impl Default for RadarStreamConfig {
    fn default() -> Self {
        Self { pillar_channels: 64, stage_widths: vec![64, 128], convs_per_stage: 2, up_width: 64 }
    }
}

impl RadarStreamConfig {
    pub fn toy() -> Self {
        Self { pillar_channels: 16, stage_widths: vec![32, 32], convs_per_stage: 1, up_width: 16 }
    }

    pub fn out_channels(&self) -> usize {
        self.up_width * self.stage_widths.len()
    }
}

/// Output spatial size is the pseudo-image size divided by this.
pub const RADAR_BEV_STRIDE: usize = 2;

/// SECOND stages (each stride 2) with an FPN neck at the first stage's resolution.
#[derive(Clone, Debug)]
pub struct RadarBevEncoder {
    fpn: SecondFpn,
}

impl RadarBevEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &RadarStreamConfig) -> Self {
        let fpn = SecondFpn::new(
            store,
            name,
            SecondFpnConfig {
                in_channels,
                stage_widths: cfg.stage_widths.clone(),
                stage_strides: vec![RADAR_BEV_STRIDE; cfg.stage_widths.len()],
                convs_per_stage: cfg.convs_per_stage,
                up_width: cfg.up_width,
            },
        );
        Self { fpn }
    }

    pub fn out_channels(&self) -> usize {
        self.fpn.config.out_channels()
    }

    pub fn forward(&self, g: &mut Graph, pseudo_image: Var) -> Var {
        self.fpn.forward(g, pseudo_image)
    }
}

/// Pillar features -> pseudo-image -> BEV features.
#[derive(Clone, Debug)]
pub struct RadarStream {
    pub pfn: PillarFeatureNet,
    pub encoder: RadarBevEncoder,
    pub grid_shape: (usize, usize),
}

impl RadarStream {
    pub fn new(store: &mut ParamStore, name: &str, num_extras: usize, grid: &BevGridSpec, cfg: &RadarStreamConfig) -> Result<Self> {
        let total: usize = RADAR_BEV_STRIDE.pow(cfg.stage_widths.len() as u32);
        let (ny, nx) = grid.grid_shape();
        if ny % total != 0 || nx % total != 0 {
            return Err(crate::Error::config(format!("radar grid {ny}x{nx} must be divisible by {total}")));
        }
        let pfn = PillarFeatureNet::new(store, &format!("{name}.pfn"), num_extras, cfg.pillar_channels, grid);
        let encoder = RadarBevEncoder::new(store, &format!("{name}.bev"), cfg.pillar_channels, cfg);
        Ok(Self { pfn, encoder, grid_shape: (ny, nx) })
    }

    pub fn out_channels(&self) -> usize {
        self.encoder.out_channels()
    }

    /// `[C_bev, ny / 2, nx / 2]`.
    pub fn forward(&self, g: &mut Graph, batch: &PillarBatch) -> Result<Var> {
        let feats = self.pfn.forward(g, batch);
        let map = g.scatter_pillars(feats, &batch.coords, self.grid_shape)?;
        Ok(self.encoder.forward(g, map))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check, sample_coords, DEFAULT_EPS};
    use crate::nn::{random_tensor, Tensor};
    use crate::radar::{pillarize, PillarConfig, RadarPointCloud, RadarSchema};

    fn run(enc: &RadarBevEncoder, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut g = Graph::new(store).without_grad();
        let v = g.input(x.clone());
        let y = enc.forward(&mut g, v);
        g.value(y).clone()
    }

    #[test]
    fn output_shape_is_half_resolution() {
        let cfg = RadarStreamConfig::default();
        let mut store = ParamStore::new(1);
        let enc = RadarBevEncoder::new(&mut store, "r", 64, &cfg);
        let y = run(&enc, &store, &Tensor::zeros(&[64, 32, 24]));
        assert_eq!(y.shape(), &[128, 16, 12]);
        assert!(y.is_finite());
    }

    #[test]
    fn zero_input_is_deterministic() {
        let cfg = RadarStreamConfig::toy();
        let mut a = ParamStore::new(4);
        let ea = RadarBevEncoder::new(&mut a, "r", 16, &cfg);
        let mut b = ParamStore::new(4);
        let eb = RadarBevEncoder::new(&mut b, "r", 16, &cfg);
        let x = Tensor::zeros(&[16, 8, 8]);
        let ya = run(&ea, &a, &x);
        assert_eq!(ya, run(&eb, &b, &x));
        // Zero biases propagate zeros.
        assert!(ya.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = RadarStreamConfig::toy();
        let mut store = ParamStore::new(9);
        let enc = RadarBevEncoder::new(&mut store, "r", 4, &cfg);
        let x = random_tensor(&[4, 8, 8], -1.0, 1.0, 2);
        let probe = random_tensor(&[cfg.out_channels(), 4, 4], -1.0, 1.0, 3);
        let mut g = Graph::new(&store);
        let xv = g.leaf(x.clone());
        let y = enc.forward(&mut g, xv);
        let l = g.dot_const(y, &probe);
        let analytic = g.backward(l).wrt(xv).unwrap().clone();
        let f = |t: &Tensor| {
            let y = run(&enc, &store, t);
            y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let r = check(f, &x, &analytic, &sample_coords(x.len(), 128, 0), DEFAULT_EPS);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn stream_is_deterministic_end_to_end() {
        let grid = BevGridSpec::toy();
        let cfg = RadarStreamConfig::toy();
        let pts: Vec<[f32; 3]> = (0..200).map(|i| [(i % 25) as f32 + 0.3, (i % 17) as f32 - 8.0, 0.5]).collect();
        let extras = (0..800).map(|i| (i % 9) as f32).collect();
        let cloud = RadarPointCloud::new(pts, extras, RadarSchema::vod()).unwrap();
        let out = |seed| {
            let mut store = ParamStore::new(seed);
            let s = RadarStream::new(&mut store, "radar", 4, &grid, &cfg).unwrap();
            let b = pillarize(&cloud, &grid, &PillarConfig { max_points: 4, max_pillars: 100 }, &[0, 1, 2, 3], 7).unwrap();
            let mut g = Graph::new(&store).without_grad();
            let v = s.forward(&mut g, &b).unwrap();
            g.value(v).clone()
        };
        let a = out(5);
        assert_eq!(a.shape(), &[32, 32, 32]);
        assert_eq!(a, out(5));
    }

    #[test]
    fn gradients_reach_pillar_net() {
        let grid = BevGridSpec::new((0.0, 4.0), (-2.0, 2.0), (-1.0, 3.0), (0.5, 0.5)).unwrap();
        let cfg = RadarStreamConfig::toy();
        let mut store = ParamStore::new(2);
        let s = RadarStream::new(&mut store, "radar", 4, &grid, &cfg).unwrap();
        let cloud = RadarPointCloud::new(vec![[1.1, 0.2, 0.3], [2.7, -1.2, 1.0]], vec![1.0; 8], RadarSchema::vod()).unwrap();
        let b = pillarize(&cloud, &grid, &PillarConfig::default(), &[0, 1, 2, 3], 0).unwrap();
        let mut g = Graph::new(&store);
        let y = s.forward(&mut g, &b).unwrap();
        let l = g.sum_all(y);
        let grads = g.backward(l);
        let w = grads.params().into_iter().find(|(id, _)| *id == s.pfn.weight).map(|(_, t)| t.clone());
        assert!(w.is_some_and(|t| t.data().iter().any(|&v| v != 0.0)));
    }
}
