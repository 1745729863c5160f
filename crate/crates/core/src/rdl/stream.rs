use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::depth_map::{build_radar_depth_map, RadarDepthMap};
use super::image::{ImageEncoder, ImageEncoderSpec};
use crate::error::{Error, Result};
use crate::geometry::{build_frustum, BevGridSpec, CameraModel, DepthBinSpec, SplatMode, SplatPlan};
use crate::nn::{Conv2d, Graph, ParamStore, Tensor, Var};
use crate::radar::{RadarPointCloud, RadarSchema};

/// Width of the learned radar depth feature.
pub const RADAR_DEPTH_FEATURES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdlConfig {
    pub image_encoder: ImageEncoderSpec,
    /// Hidden width of the depth branch's 3x3 conv.
    pub depth_hidden: usize,
    pub context_channels: usize,
    pub bins: DepthBinSpec,
    /// Extra radar channels fed to depth prediction, by name; empty means all.
    #[serde(default)]
    pub radar_channels: Vec<String>,
    /// Zero the extra channels and keep only projected depth.
    #[serde(default)]
    pub ablate_extras: bool,
    #[serde(default)]
    pub splat_mode: SplatMode,
}

impl Default for RdlConfig {
    fn default() -> Self {
        Self {
            image_encoder: ImageEncoderSpec::default(),
            depth_hidden: 128,
            context_channels: 80,
            bins: DepthBinSpec::vod(),
            radar_channels: Vec::new(),
            ablate_extras: false,
            splat_mode: SplatMode::Deterministic,
        }
    }
}

impl RdlConfig {
    pub fn toy() -> Self {
        Self {
            image_encoder: ImageEncoderSpec::toy(),
            depth_hidden: 32,
            context_channels: 32,
            bins: DepthBinSpec::toy(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image_encoder.validate()?;
        self.bins.validate()?;
        if self.depth_hidden == 0 || self.context_channels == 0 {
            return Err(Error::config("depth_hidden and context_channels must be positive"));
        }
        Ok(())
    }
}

/// Pointwise `N + 1 -> 64` map of the radar depth map followed by ReLU.
///
/// Occupied pixels are normalized first (depth by `depth_scale`, extras by
/// their schema constants). Empty pixels stay all-zero, so their response is
/// `relu(bias)`.
#[derive(Clone, Debug)]
pub struct RadarDepthTransform {
    pub conv: Conv2d,
    scale: Vec<f64>,
    shift: Vec<f64>,
}

impl RadarDepthTransform {
    pub fn new(store: &mut ParamStore, name: &str, schema: &RadarSchema, channels: &[usize], depth_scale: f64, ablate_extras: bool) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::config("radar depth transform needs at least one extra channel"));
        }
        let mut scale = vec![1.0 / depth_scale];
        let mut shift = vec![0.0];
        for &c in channels {
            let ch = schema
                .extra_channels
                .get(c)
                .ok_or_else(|| Error::config(format!("extra channel {c} out of range for schema `{}`", schema.name)))?;
            if ablate_extras {
                scale.push(0.0);
                shift.push(0.0);
            } else {
                scale.push(1.0 / ch.norm_scale);
                shift.push(-ch.norm_shift / ch.norm_scale);
            }
        }
        let conv = Conv2d::pointwise(store, name, channels.len() + 1, RADAR_DEPTH_FEATURES);
        assert_eq!((conv.in_channels, conv.out_channels), (channels.len() + 1, RADAR_DEPTH_FEATURES));
        Ok(Self { conv, scale, shift })
    }

    pub fn in_channels(&self) -> usize {
        self.conv.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn forward(&self, g: &mut Graph, map: &RadarDepthMap) -> Result<Var> {
        let x = g.input(map.channels.clone());
        self.forward_var(g, x, &map.mask)
    }

    /// Same as [`forward`](Self::forward) on a raw `[N + 1, h, w]` node.
    pub fn forward_var(&self, g: &mut Graph, raw: Var, mask: &[bool]) -> Result<Var> {
        let shape = g.shape(raw).to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels() {
            return Err(Error::config(format!("radar depth map has shape {shape:?}, transform expects {} channels", self.in_channels())));
        }
        let plane = shape[1] * shape[2];
        assert_eq!(mask.len(), plane, "mask size");
        let mut s = Tensor::zeros(&shape);
        let mut b = Tensor::zeros(&shape);
        for c in 0..shape[0] {
            s.data_mut()[c * plane..(c + 1) * plane].fill(self.scale[c]);
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    b.data_mut()[c * plane + p] = self.shift[c];
                }
            }
        }
        let x = g.mul_const(raw, &s);
        let x = g.add_const(x, &b);
        let y = self.conv.forward(g, x);
        Ok(g.relu(y))
    }
}

/// Depth distribution from image features concatenated with radar depth
/// features; context from image features alone.
#[derive(Clone, Debug)]
pub struct DepthContextHead {
    depth_conv: Conv2d,
    depth_out: Conv2d,
    context: Conv2d,
    pub num_bins: usize,
    pub context_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthContext {
    pub logits: Var,
    /// Softmax over bins, `[D, h, w]`.
    pub probs: Var,
    pub context: Var,
}

impl DepthContextHead {
    pub fn new(store: &mut ParamStore, name: &str, img_channels: usize, hidden: usize, num_bins: usize, context_channels: usize) -> Self {
        Self {
            depth_conv: Conv2d::new(store, &format!("{name}.depth0"), img_channels + RADAR_DEPTH_FEATURES, hidden, 3, 1),
            depth_out: Conv2d::pointwise(store, &format!("{name}.depth1"), hidden, num_bins),
            context: Conv2d::pointwise(store, &format!("{name}.context"), img_channels, context_channels),
            num_bins,
            context_channels,
        }
    }

    pub fn forward(&self, g: &mut Graph, img_feat: Var, radar_feat: Var) -> Result<DepthContext> {
        let (a, b) = (g.shape(img_feat).to_vec(), g.shape(radar_feat).to_vec());
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return Err(Error::config(format!("image features {a:?} and radar features {b:?} differ spatially")));
        }
        let x = g.concat0(&[img_feat, radar_feat]);
        let h = self.depth_conv.forward(g, x);
        let h = g.relu(h);
        let logits = self.depth_out.forward(g, h);
        let probs = g.softmax0(logits);
        let context = self.context.forward(g, img_feat);
        Ok(DepthContext { logits, probs, context })
    }
}

/// Intermediate nodes of one camera-stream forward pass.
#[derive(Clone, Debug)]
pub struct RdlOutput {
    /// `[C_ctx, ny, nx]`.
    pub bev: Var,
    pub depth: DepthContext,
    pub radar_map: RadarDepthMap,
    pub plan: Arc<SplatPlan>,
}

/// Image encoder, radar-augmented depth prediction and lift-splat onto `grid`.
#[derive(Debug)]
pub struct RdlStream {
    pub config: RdlConfig,
    pub encoder: ImageEncoder,
    pub transform: RadarDepthTransform,
    pub head: DepthContextHead,
    pub channels: Vec<usize>,
    pub grid: BevGridSpec,
    plans: Mutex<Vec<(CameraModel, Arc<SplatPlan>)>>,
}

impl RdlStream {
    pub fn new(store: &mut ParamStore, name: &str, config: RdlConfig, schema: &RadarSchema, grid: BevGridSpec) -> Result<Self> {
        config.validate()?;
        grid.validate()?;
        let channels = schema.select(&config.radar_channels)?;
        let encoder = ImageEncoder::new(store, &format!("{name}.image"), config.image_encoder.clone())?;
        let transform = RadarDepthTransform::new(store, &format!("{name}.radar_depth"), schema, &channels, config.bins.d_max, config.ablate_extras)?;
        let head = DepthContextHead::new(
            store,
            &format!("{name}.head"),
            config.image_encoder.out_channels(),
            config.depth_hidden,
            config.bins.num_bins,
            config.context_channels,
        );
        Ok(Self { config, encoder, transform, head, channels, grid, plans: Mutex::new(Vec::new()) })
    }

    pub fn stride(&self) -> usize {
        self.config.image_encoder.total_stride()
    }

    /// Cached frustum-to-BEV plan for `camera`.
    pub fn plan(&self, camera: &CameraModel) -> Result<Arc<SplatPlan>> {
        let mut plans = self.plans.lock().expect("plan cache poisoned");
        if let Some((_, p)) = plans.iter().find(|(c, _)| c == camera) {
            return Ok(p.clone());
        }
        let fs = self.config.image_encoder.feature_size(camera.image_size)?;
        let frustum = build_frustum(fs, &self.config.bins, camera, self.stride())?;
        let plan = Arc::new(SplatPlan::new(&frustum, &self.grid, self.config.splat_mode));
        if plans.len() >= 16 {
            plans.remove(0);
        }
        plans.push((camera.clone(), plan.clone()));
        Ok(plan)
    }

    pub fn radar_map(&self, cloud: &RadarPointCloud, camera: &CameraModel) -> Result<RadarDepthMap> {
        let fs = self.config.image_encoder.feature_size(camera.image_size)?;
        build_radar_depth_map(cloud, camera, fs, self.stride(), &self.channels)
    }

    pub fn forward(&self, g: &mut Graph, image: Var, cloud: &RadarPointCloud, camera: &CameraModel) -> Result<RdlOutput> {
        let shape = g.shape(image);
        if shape.len() != 3 || (shape[1], shape[2]) != camera.image_size {
            return Err(Error::InvalidInput(format!("image shape {shape:?} does not match camera size {:?}", camera.image_size)));
        }
        let img = self.encoder.forward(g, image)?;
        let radar_map = self.radar_map(cloud, camera)?;
        let radar = self.transform.forward(g, &radar_map)?;
        let depth = self.head.forward(g, img, radar)?;
        let plan = self.plan(camera)?;
        let bev = g.lift_splat(depth.probs, depth.context, plan.clone());
        Ok(RdlOutput { bev, depth, radar_map, plan })
    }

    /// Depth-bin targets at radar-occupied pixels, `None` elsewhere.
    pub fn depth_targets(&self, map: &RadarDepthMap) -> Vec<Option<usize>> {
        let (h, w) = map.feature_size();
        (0..h * w)
            .map(|p| if map.mask[p] { self.config.bins.bin_of(map.channels.data()[p]) } else { None })
            .collect()
    }
}

/// Per-channel BEV mass expected from lifting: `sum_pixels context * in_range_mass`.
pub fn expected_bev_mass(plan: &SplatPlan, probs: &Tensor, context: &Tensor) -> Vec<f64> {
    let mass = plan.in_range_mass(probs);
    let (c, h, w) = context.dims3();
    let npix = h * w;
    (0..c)
        .map(|ch| context.data()[ch * npix..(ch + 1) * npix].iter().zip(&mass).map(|(a, m)| a * m).sum())
        .collect()
}
