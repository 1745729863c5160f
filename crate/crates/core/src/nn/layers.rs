use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

/// Square-kernel convolution with "same" padding (`kernel / 2`).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add_he(format!("{name}.weight"), &[out_channels, in_channels, kernel, kernel], fan_in);
        let bias = Some(store.add_const(format!("{name}.bias"), &[out_channels], 0.0));
        Self { weight, bias, in_channels, out_channels, kernel, stride }
    }

    pub fn pointwise(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize) -> Self {
        Self::new(store, name, in_channels, out_channels, 1, 1)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        debug_assert_eq!(g.shape(x)[0], self.in_channels, "conv input width");
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.kernel / 2)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Per-position normalization across channels with learned scale and shift.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), &[channels], 1.0);
        let beta = store.add_const(format!("{name}.beta"), &[channels], 0.0);
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm0(x, gamma, beta)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualSpec {
    /// Number of norm -> relu -> conv units; kernels alternate 1x1, 3x3.
    pub layers: usize,
}

impl Default for ResidualSpec {
    fn default() -> Self {
        Self { layers: 2 }
    }
}

/// Pre-activation branch `F` of a residual block. The first unit maps
/// `in -> out`, the rest keep `out` channels.
#[derive(Clone, Debug)]
pub struct PreActBranch {
    units: Vec<(ChannelNorm, Conv2d)>,
}

impl PreActBranch {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, spec: ResidualSpec) -> Self {
        assert!(spec.layers >= 1, "residual branch needs at least one layer");
        let mut units = Vec::with_capacity(spec.layers);
        let mut c = in_channels;
        for i in 0..spec.layers {
            let k = if i % 2 == 0 { 1 } else { 3 };
            let norm = ChannelNorm::new(store, &format!("{name}.{i}.norm"), c);
            let conv = Conv2d::new(store, &format!("{name}.{i}.conv"), c, out_channels, k, 1);
            units.push((norm, conv));
            c = out_channels;
        }
        Self { units }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        for (norm, conv) in &self.units {
            h = norm.forward(g, h);
            h = g.relu(h);
            h = conv.forward(g, h);
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.units.iter().flat_map(|(n, c)| n.params().into_iter().chain(c.params())).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SecondFpnConfig {
    pub in_channels: usize,
    pub stage_widths: Vec<usize>,
    /// Stride of each stage relative to its input.
    pub stage_strides: Vec<usize>,
    pub convs_per_stage: usize,
    /// Channels per upsampled branch; output width is `up_width * stages`.
    pub up_width: usize,
}

impl SecondFpnConfig {
    pub fn out_channels(&self) -> usize {
        self.up_width * self.stage_widths.len()
    }

    /// Output stride relative to the input map (the first stage's stride).
    pub fn out_stride(&self) -> usize {
        self.stage_strides[0]
    }

    pub fn total_stride(&self) -> usize {
        self.stage_strides.iter().product()
    }
}

/// SECOND-style strided conv stages followed by an FPN-style neck that
/// brings every stage to the first stage's resolution and concatenates.
#[derive(Clone, Debug)]
pub struct SecondFpn {
    pub config: SecondFpnConfig,
    stages: Vec<Vec<Conv2d>>,
    ups: Vec<Conv2d>,
}

impl SecondFpn {
    pub fn new(store: &mut ParamStore, name: &str, config: SecondFpnConfig) -> Self {
        assert_eq!(config.stage_widths.len(), config.stage_strides.len());
        assert!(!config.stage_widths.is_empty() && config.convs_per_stage >= 1);
        for &s in &config.stage_strides[1..] {
            assert!(s == 1 || s == 2, "neck upsampling supports stage strides of 1 or 2");
        }
        let mut stages = Vec::new();
        let mut ups = Vec::new();
        let mut c = config.in_channels;
        for (i, (&w, &s)) in config.stage_widths.iter().zip(&config.stage_strides).enumerate() {
            let mut convs = vec![Conv2d::new(store, &format!("{name}.stage{i}.0"), c, w, 3, s)];
            for j in 1..config.convs_per_stage {
                convs.push(Conv2d::new(store, &format!("{name}.stage{i}.{j}"), w, w, 3, 1));
            }
            stages.push(convs);
            ups.push(Conv2d::pointwise(store, &format!("{name}.up{i}"), w, config.up_width));
            c = w;
        }
        Self { config, stages, ups }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let mut branches = Vec::with_capacity(self.stages.len());
        let mut rel = 1usize;
        for (i, (convs, up)) in self.stages.iter().zip(&self.ups).enumerate() {
            for conv in convs {
                h = conv.forward(g, h);
                h = g.relu(h);
            }
            if i > 0 {
                rel *= self.config.stage_strides[i];
            }
            let mut b = up.forward(g, h);
            b = g.relu(b);
            let mut r = rel;
            while r > 1 {
                b = g.upsample2x(b);
                r /= 2;
            }
            branches.push(b);
        }
        g.concat0(&branches)
    }
}
