use serde::{Deserialize, Serialize};

use super::anchors::{AnchorSpec, BOX_CODE_SIZE};
use crate::nn::{Conv2d, Graph, ParamStore, SecondFpn, SecondFpnConfig, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BevEncoderConfig {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub up_width: usize,
}

impl Default for BevEncoderConfig {
    fn default() -> Self {
        Self { stage_widths: vec![128, 256], convs_per_stage: 2, up_width: 128 }
    }
}

impl BevEncoderConfig {
    pub fn toy() -> Self {
        Self { stage_widths: vec![32, 64], convs_per_stage: 1, up_width: 32 }
    }

    pub fn out_channels(&self) -> usize {
        self.up_width * self.stage_widths.len()
    }
}

/// BEV-stage backbone over the fused map. The first stage keeps the input
/// resolution and later stages halve it, so the output stride is 1.
#[derive(Clone, Debug)]
pub struct BevEncoder {
    fpn: SecondFpn,
}

impl BevEncoder {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, cfg: &BevEncoderConfig) -> Self {
        let mut strides = vec![2; cfg.stage_widths.len()];
        strides[0] = 1;
        let fpn = SecondFpn::new(
            store,
            name,
            SecondFpnConfig {
                in_channels,
                stage_widths: cfg.stage_widths.clone(),
                stage_strides: strides,
                convs_per_stage: cfg.convs_per_stage,
                up_width: cfg.up_width,
            },
        );
        Self { fpn }
    }

    pub fn out_channels(&self) -> usize {
        self.fpn.config.out_channels()
    }

    /// Divisor the input size must satisfy.
    pub fn size_multiple(&self) -> usize {
        self.fpn.config.total_stride()
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        self.fpn.forward(g, x)
    }
}

/// Pointwise classification, box and direction branches. For anchor slot `a`
/// of a cell, channel `a` carries its logit, channels `7a..7a + 7` its box
/// deltas and `2a..2a + 2` its direction logits.
#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub dir: Conv2d,
    pub per_cell: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub cls: Var,
    pub boxes: Var,
    pub dir: Var,
}

/// Head outputs detached from a graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTensors {
    pub cls: Tensor,
    pub boxes: Tensor,
    pub dir: Tensor,
}

/// Initial positive probability of every anchor.
const PRIOR: f64 = 0.01;

impl DetectionHead {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, spec: &AnchorSpec) -> Self {
        let a = spec.per_cell();
        let cls = Conv2d::pointwise(store, &format!("{name}.cls"), in_channels, a);
        let b = cls.bias.expect("conv has bias");
        store.get_mut(b).data_mut().fill(-((1.0 - PRIOR) / PRIOR).ln());
        let reg = Conv2d::pointwise(store, &format!("{name}.reg"), in_channels, a * BOX_CODE_SIZE);
        let dir = Conv2d::pointwise(store, &format!("{name}.dir"), in_channels, a * 2);
        // Small box init keeps early decoded boxes near their anchors.
        for id in [reg.weight, dir.weight] {
            store.get_mut(id).scale_in_place(0.1);
        }
        Self { cls, reg, dir, per_cell: a }
    }

    pub fn forward(&self, g: &mut Graph, feat: Var) -> HeadOutput {
        HeadOutput { cls: self.cls.forward(g, feat), boxes: self.reg.forward(g, feat), dir: self.dir.forward(g, feat) }
    }
}

impl HeadOutput {
    pub fn tensors(&self, g: &Graph) -> HeadTensors {
        HeadTensors { cls: g.value(self.cls).clone(), boxes: g.value(self.boxes).clone(), dir: g.value(self.dir).clone() }
    }
}

impl HeadTensors {
    pub fn per_cell(&self) -> usize {
        self.cls.shape()[0]
    }

    pub fn num_cells(&self) -> usize {
        self.cls.len() / self.per_cell()
    }

    pub fn num_anchors(&self) -> usize {
        self.cls.len()
    }

    pub fn cls_logit(&self, i: usize) -> f64 {
        let (a, n) = (self.per_cell(), self.num_cells());
        self.cls.data()[(i % a) * n + i / a]
    }

    pub fn box_deltas(&self, i: usize) -> [f64; BOX_CODE_SIZE] {
        let (a, n) = (self.per_cell(), self.num_cells());
        let (cell, slot) = (i / a, i % a);
        std::array::from_fn(|k| self.boxes.data()[(slot * BOX_CODE_SIZE + k) * n + cell])
    }

    pub fn dir_logits(&self, i: usize) -> [f64; 2] {
        let (a, n) = (self.per_cell(), self.num_cells());
        let (cell, slot) = (i / a, i % a);
        std::array::from_fn(|k| self.dir.data()[(slot * 2 + k) * n + cell])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BevGridSpec;
    use crate::nn::gradcheck::{check, sample_coords, DEFAULT_EPS};
    use crate::nn::random_tensor;

    #[test]
    fn encoder_keeps_resolution() {
        let mut store = ParamStore::new(1);
        let enc = BevEncoder::new(&mut store, "bev", 32, &BevEncoderConfig::toy());
        let mut g = Graph::new(&store).without_grad();
        let x = g.input(random_tensor(&[32, 32, 32], -1.0, 1.0, 2));
        let y = enc.forward(&mut g, x);
        assert_eq!(g.shape(y), &[64, 32, 32]);
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn encoder_gradient() {
        let mut store = ParamStore::new(3);
        let cfg = BevEncoderConfig { stage_widths: vec![4, 6], convs_per_stage: 1, up_width: 3 };
        let enc = BevEncoder::new(&mut store, "bev", 5, &cfg);
        let x = random_tensor(&[5, 8, 8], -1.0, 1.0, 4);
        let probe = random_tensor(&[6, 8, 8], -1.0, 1.0, 5);
        let mut g = Graph::new(&store);
        let xv = g.leaf(x.clone());
        let y = enc.forward(&mut g, xv);
        let l = g.dot_const(y, &probe);
        let analytic = g.backward(l).wrt(xv).unwrap().clone();
        let f = |t: &Tensor| {
            let mut g = Graph::new(&store);
            let xv = g.input(t.clone());
            let y = enc.forward(&mut g, xv);
            g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let r = check(f, &x, &analytic, &sample_coords(x.len(), 128, 0), DEFAULT_EPS);
        assert!(r.passes(1e-4), "{r:?}");
    }

    #[test]
    fn head_shapes_match_anchor_count() {
        let spec = AnchorSpec::vod();
        let grid = BevGridSpec::toy().coarsened(2).unwrap();
        let mut store = ParamStore::new(4);
        let head = DetectionHead::new(&mut store, "head", 16, &spec);
        let mut g = Graph::new(&store).without_grad();
        let x = g.input(random_tensor(&[16, 32, 32], -1.0, 1.0, 2));
        let out = head.forward(&mut g, x).tensors(&g);
        assert_eq!(out.num_anchors(), spec.generate(&grid).len());
        assert_eq!(out.boxes.shape(), &[6 * 7, 32, 32]);
        assert_eq!(out.dir.shape(), &[12, 32, 32]);
        // Anchor 7 is slot 1 of cell 1.
        assert_eq!(out.cls_logit(7), out.cls.data()[1024 + 1]);
        assert_eq!(out.box_deltas(7)[2], out.boxes.data()[(7 + 2) * 1024 + 1]);
    }
}
