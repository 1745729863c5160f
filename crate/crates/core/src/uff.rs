//! Unified feature fusion: per-modality channel unifiers, one shared
//! residual encoder, softmax-weighted concatenation and a fused encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Graph, ParamId, ParamStore, PreActBranch, ResidualSpec, Var};

/// Modalities in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Camera = 0,
    Radar = 1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UffConfig {
    pub unified_channels: usize,
    pub fused_channels: usize,
    #[serde(default)]
    pub residual: ResidualSpec,
}

impl Default for UffConfig {
    fn default() -> Self {
        Self { unified_channels: 128, fused_channels: 128, residual: ResidualSpec::default() }
    }
}

impl UffConfig {
    pub fn toy() -> Self {
        Self { unified_channels: 32, fused_channels: 32, residual: ResidualSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.unified_channels == 0 || self.fused_channels == 0 || self.residual.layers == 0 {
            return Err(Error::config("fusion widths and residual depth must be positive"));
        }
        Ok(())
    }
}

/// Fusion output plus the per-cell modality weights `[M, ny, nx]`.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub fused: Var,
    pub weights: Var,
}

#[derive(Clone, Debug)]
pub struct UnifiedFeatureFusion {
    pub config: UffConfig,
    unifiers: Vec<Conv2d>,
    shared: PreActBranch,
    gates: Vec<Conv2d>,
    proj: Conv2d,
    fused: PreActBranch,
}

fn check_width(g: &Graph, x: Var, want: usize, what: &str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 3 || s[0] != want {
        return Err(Error::config(format!("{what} expects {want} channels, got shape {s:?}")));
    }
    Ok(())
}

impl UnifiedFeatureFusion {
    /// `input_channels[m]` is the BEV width of modality `m`.
    pub fn new(store: &mut ParamStore, name: &str, input_channels: &[usize], config: UffConfig) -> Result<Self> {
        config.validate()?;
        if input_channels.len() < 2 {
            return Err(Error::config(format!("fusion needs at least 2 modalities, got {}", input_channels.len())));
        }
        let cu = config.unified_channels;
        let m = input_channels.len();
        let unifiers = input_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, &format!("{name}.unify{i}"), c, cu))
            .collect();
        let shared = PreActBranch::new(store, &format!("{name}.shared"), cu, cu, config.residual);
        let gates = (0..m).map(|i| Conv2d::pointwise(store, &format!("{name}.gate{i}"), cu, 1)).collect();
        let proj = Conv2d::pointwise(store, &format!("{name}.proj"), m * cu, config.fused_channels);
        let fused = PreActBranch::new(store, &format!("{name}.fused"), m * cu, config.fused_channels, config.residual);
        Ok(Self { config, unifiers, shared, gates, proj, fused })
    }

    pub fn num_modalities(&self) -> usize {
        self.unifiers.len()
    }

    pub fn shared_params(&self) -> Vec<ParamId> {
        self.shared.params()
    }

    pub fn fused_branch_params(&self) -> Vec<ParamId> {
        self.fused.params()
    }

    pub fn channel_unify(&self, g: &mut Graph, feat: Var, modality: usize) -> Result<Var> {
        let u = self
            .unifiers
            .get(modality)
            .ok_or_else(|| Error::config(format!("unknown modality id {modality}")))?;
        check_width(g, feat, u.in_channels, "channel unifier")?;
        Ok(u.forward(g, feat))
    }

    /// `feat + F(feat)` with the same `F` for every modality.
    pub fn shared_encode(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        check_width(g, feat, self.config.unified_channels, "shared encoder")?;
        let f = self.shared.forward(g, feat);
        Ok(g.add(feat, f))
    }

    pub fn softmax_concat_fuse(&self, g: &mut Graph, feats: &[Var]) -> Result<FusionOutput> {
        if feats.len() < 2 || feats.len() != self.gates.len() {
            return Err(Error::config(format!("fusion expects {} modality maps, got {}", self.gates.len(), feats.len())));
        }
        let shape = g.shape(feats[0]).to_vec();
        for &f in feats {
            if g.shape(f) != shape.as_slice() {
                return Err(Error::config("fusion inputs must share one shape"));
            }
        }
        check_width(g, feats[0], self.config.unified_channels, "softmax fusion")?;
        let logits: Vec<Var> = feats.iter().zip(&self.gates).map(|(&f, gate)| gate.forward(g, f)).collect();
        let logits = g.concat0(&logits);
        let weights = g.softmax0(logits);
        let blocks: Vec<Var> = feats
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let w = g.slice0(weights, i, 1);
                g.mul_broadcast0(f, w)
            })
            .collect();
        Ok(FusionOutput { fused: g.concat0(&blocks), weights })
    }

    /// `P(feat) + G(feat)`, `P` a pointwise projection to `C_f`.
    pub fn fused_encode(&self, g: &mut Graph, feat: Var) -> Result<Var> {
        check_width(g, feat, self.num_modalities() * self.config.unified_channels, "fused encoder")?;
        let p = self.proj.forward(g, feat);
        let r = self.fused.forward(g, feat);
        Ok(g.add(p, r))
    }

    /// Full fusion of per-modality BEV maps given in [`Modality`] order.
    pub fn forward(&self, g: &mut Graph, feats: &[Var]) -> Result<FusionOutput> {
        if feats.len() != self.num_modalities() {
            return Err(Error::config(format!("expected {} modality maps, got {}", self.num_modalities(), feats.len())));
        }
        let mut enc = Vec::with_capacity(feats.len());
        for (i, &f) in feats.iter().enumerate() {
            let u = self.channel_unify(g, f, i)?;
            enc.push(self.shared_encode(g, u)?);
        }
        let fo = self.softmax_concat_fuse(g, &enc)?;
        Ok(FusionOutput { fused: self.fused_encode(g, fo.fused)?, weights: fo.weights })
    }
}
