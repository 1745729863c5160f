//! The assembled detector: radar pillars and RDL camera stream, unified
//! feature fusion, BEV encoder and anchor head.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{
    assign_targets, compute_losses, decode_and_nms, AnchorSpec, Anchors, BevEncoder, BevEncoderConfig, Box3D, DecodeConfig, DetectionHead,
    HeadOutput, LossConfig,
};
use crate::error::{Error, Result};
use crate::eval::Detector;
use crate::geometry::{BevGridSpec, CameraModel, DepthBinSpec, SplatMode};
use crate::nn::{Graph, ParamStore, Tensor, Var};
use crate::radar::{pillarize, PillarConfig, RadarSchema, RadarStream, RadarStreamConfig, RADAR_BEV_STRIDE};
use crate::rdl::{ImageEncoderSpec, RdlConfig, RdlStream};
use crate::synth::{Frame, Image};
use crate::uff::{UffConfig, UnifiedFeatureFusion};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Radar schema name, `vod` or `tj4d`.
    pub schema: String,
    /// Pillar grid; fusion runs on this grid coarsened by the radar stride.
    pub grid: BevGridSpec,
    /// `(height, width)` the camera stream consumes.
    pub image_size: (usize, usize),
    pub pillars: PillarConfig,
    pub radar: RadarStreamConfig,
    pub rdl: RdlConfig,
    pub uff: UffConfig,
    pub bev: BevEncoderConfig,
    pub anchors: AnchorSpec,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    /// Parameter initialization seed.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale model for the synthetic toy scenes.
    pub fn toy(schema: &str) -> Self {
        let anchors = if schema == "tj4d" { AnchorSpec::tj4d() } else { AnchorSpec::vod() };
        Self {
            schema: schema.into(),
            grid: BevGridSpec::toy(),
            image_size: (128, 192),
            pillars: PillarConfig { max_points: 16, max_pillars: 2000 },
            radar: RadarStreamConfig::toy(),
            rdl: RdlConfig::toy(),
            uff: UffConfig::toy(),
            bev: BevEncoderConfig::toy(),
            anchors,
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            init_seed: 0,
        }
    }

    pub fn vod() -> Self {
        Self {
            schema: "vod".into(),
            grid: BevGridSpec::vod(),
            image_size: (608, 968),
            pillars: PillarConfig::default(),
            radar: RadarStreamConfig::default(),
            rdl: RdlConfig { bins: DepthBinSpec::vod(), ..RdlConfig::default() },
            uff: UffConfig::default(),
            bev: BevEncoderConfig::default(),
            anchors: AnchorSpec::vod(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            init_seed: 0,
        }
    }

    pub fn tj4d() -> Self {
        Self {
            schema: "tj4d".into(),
            grid: BevGridSpec::tj4d(),
            image_size: (480, 640),
            rdl: RdlConfig { bins: DepthBinSpec::tj4d(), ..RdlConfig::default() },
            anchors: AnchorSpec::tj4d(),
            ..Self::vod()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy("vod")),
            "vod" => Ok(Self::vod()),
            "tj4d" => Ok(Self::tj4d()),
            other => Err(Error::config(format!("unknown preset `{other}` (expected toy, vod or tj4d)"))),
        }
    }

    pub fn fusion_grid(&self) -> Result<BevGridSpec> {
        self.grid.coarsened(RADAR_BEV_STRIDE)
    }

    /// Digest of everything that shapes the weights. The initialization seed
    /// and the splat execution mode are left out: a checkpoint stays usable
    /// whatever seed produced it and in either mode.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.init_seed = 0;
        c.rdl.splat_mode = SplatMode::Deterministic;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<()> {
        RadarSchema::by_name(&self.schema)?;
        self.grid.validate()?;
        self.rdl.validate()?;
        self.uff.validate()?;
        self.anchors.validate()?;
        let fusion = self.fusion_grid()?;
        let (ny, nx) = self.grid.grid_shape();
        if ny % RADAR_BEV_STRIDE != 0 || nx % RADAR_BEV_STRIDE != 0 {
            return Err(Error::config(format!("pillar grid {ny}x{nx} must be divisible by {RADAR_BEV_STRIDE}")));
        }
        let radar_total = RADAR_BEV_STRIDE.pow(self.radar.stage_widths.len() as u32);
        if ny % radar_total != 0 || nx % radar_total != 0 {
            return Err(Error::config(format!("pillar grid {ny}x{nx} must be divisible by {radar_total}")));
        }
        let (fy, fx) = fusion.grid_shape();
        let m = 1 << self.bev.stage_widths.len().saturating_sub(1);
        if fy % m != 0 || fx % m != 0 {
            return Err(Error::config(format!("fusion grid {fy}x{fx} must be divisible by {m}")));
        }
        self.rdl.image_encoder.feature_size(self.image_size)?;
        if !(0.0..=1.0).contains(&self.decode.score_threshold) {
            return Err(Error::config("decode score threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    /// The image encoder's total stride; image sizes must be multiples of it.
    pub fn image_multiple(&self) -> usize {
        self.rdl.image_encoder.total_stride()
    }

    pub fn with_image_encoder(mut self, spec: ImageEncoderSpec) -> Self {
        self.rdl.image_encoder = spec;
        self
    }

    pub fn deterministic(mut self, on: bool) -> Self {
        self.rdl.splat_mode = if on { SplatMode::Deterministic } else { SplatMode::Fast };
        self
    }
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub head: HeadOutput,
    pub depth_logits: Var,
    pub depth_probs: Var,
    pub depth_targets: Vec<Option<usize>>,
    /// Per-cell modality weights `[M, H, W]`, camera first.
    pub fusion_weights: Var,
}

/// Scalar loss terms of one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub depth: f64,
}

#[derive(Debug)]
pub struct UniBevFusion {
    pub config: ModelConfig,
    pub schema: RadarSchema,
    pub store: ParamStore,
    pub radar: RadarStream,
    pub camera: RdlStream,
    pub uff: UnifiedFeatureFusion,
    pub bev: BevEncoder,
    pub head: DetectionHead,
    pub anchors: Anchors,
    radar_channels: Vec<usize>,
}

impl UniBevFusion {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let schema = RadarSchema::by_name(&config.schema)?;
        let fusion = config.fusion_grid()?;
        let mut store = ParamStore::new(config.init_seed);
        let radar_channels: Vec<usize> = (0..schema.num_extras()).collect();
        let radar = RadarStream::new(&mut store, "radar", schema.num_extras(), &config.grid, &config.radar)?;
        let camera = RdlStream::new(&mut store, "camera", config.rdl.clone(), &schema, fusion.clone())?;
        let uff = UnifiedFeatureFusion::new(&mut store, "uff", &[config.rdl.context_channels, radar.out_channels()], config.uff.clone())?;
        let bev = BevEncoder::new(&mut store, "bev", config.uff.fused_channels, &config.bev);
        let head = DetectionHead::new(&mut store, "head", bev.out_channels(), &config.anchors);
        let anchors = config.anchors.generate(&fusion);
        Ok(Self { config, schema, store, radar, camera, uff, bev, head, anchors, radar_channels })
    }

    pub fn class_names(&self) -> Vec<String> {
        self.config.anchors.class_names()
    }

    /// Image tensor and matching camera at the model's input size. Images of
    /// another size are resampled and the intrinsics follow each axis.
    pub fn prepare_image(&self, image: &Image, camera: &CameraModel) -> Result<(Tensor, CameraModel)> {
        let want = self.config.image_size;
        if image.size() != camera.image_size {
            return Err(Error::InvalidInput(format!("image {:?} does not match camera {:?}", image.size(), camera.image_size)));
        }
        if image.size() == want {
            return Ok((image.to_tensor(), camera.clone()));
        }
        Ok((image.resized(want).to_tensor(), camera.resized_to(want)))
    }

    pub fn forward(&self, g: &mut Graph, frame: &Frame, image: &Image) -> Result<ForwardOutput> {
        if frame.radar.schema != self.schema {
            return Err(Error::Incompatible(format!("frame radar schema `{}`, model expects `{}`", frame.radar.schema.name, self.schema.name)));
        }
        let (img, cam) = self.prepare_image(image, &frame.camera)?;
        let batch = pillarize(&frame.radar, &self.config.grid, &self.config.pillars, &self.radar_channels, frame.meta.seed)?;
        let radar_bev = self.radar.forward(g, &batch)?;
        let img = g.input(img);
        let cam_out = self.camera.forward(g, img, &frame.radar, &cam)?;
        let fused = self.uff.forward(g, &[cam_out.bev, radar_bev])?;
        let feat = self.bev.forward(g, fused.fused);
        let head = self.head.forward(g, feat);
        let depth_targets = self.camera.depth_targets(&cam_out.radar_map);
        Ok(ForwardOutput { head, depth_logits: cam_out.depth.logits, depth_probs: cam_out.depth.probs, depth_targets, fusion_weights: fused.weights })
    }

    /// Training objective for one frame. Ground truth of unknown classes is ignored.
    pub fn loss(&self, g: &mut Graph, frame: &Frame) -> Result<(Var, LossValues)> {
        let out = self.forward(g, frame, &frame.image)?;
        let gts: Vec<Box3D> = frame.gt.iter().filter(|b| b.class_id < self.config.anchors.num_classes()).copied().collect();
        let targets = assign_targets(&self.anchors, &gts, &self.config.anchors);
        let det = compute_losses(g, &out.head, &targets, &self.config.loss);
        let depth = g.cross_entropy0(out.depth_logits, Arc::new(out.depth_targets));
        let total = det.total(g, &self.config.loss, Some(depth));
        let v = |x: Var| g.value(x).data()[0];
        let values = LossValues { total: v(total), cls: v(det.cls), reg: v(det.reg), dir: v(det.dir), depth: v(depth) };
        Ok((total, values))
    }

    pub fn detect(&self, frame: &Frame, image: &Image) -> Result<Vec<Box3D>> {
        let mut g = Graph::new(&self.store).without_grad();
        let out = self.forward(&mut g, frame, image)?;
        Ok(decode_and_nms(&out.head.tensors(&g), &self.anchors, &self.config.decode))
    }

    /// Camera weight of the fusion softmax per BEV cell and expected depth
    /// per image-feature pixel, for inspection.
    pub fn debug_maps(&self, frame: &Frame) -> Result<DebugMaps> {
        let mut g = Graph::new(&self.store).without_grad();
        let out = self.forward(&mut g, frame, &frame.image)?;
        let w = g.value(out.fusion_weights);
        let (_, h, wd) = w.dims3();
        let camera_weight = Tensor::from_vec(&[h, wd], w.data()[..h * wd].to_vec());
        let probs = g.value(out.depth_probs);
        let (d, fh, fw) = probs.dims3();
        let depths = self.config.rdl.bins.depths();
        let expected = (0..fh * fw).map(|p| (0..d).map(|k| probs.data()[k * fh * fw + p] * depths[k]).sum()).collect();
        Ok(DebugMaps { camera_weight, expected_depth: Tensor::from_vec(&[fh, fw], expected) })
    }
}

#[derive(Clone, Debug)]
pub struct DebugMaps {
    /// `[ny, nx]` over the fusion grid.
    pub camera_weight: Tensor,
    /// `[h, w]` in meters.
    pub expected_depth: Tensor,
}

impl Detector for UniBevFusion {
    fn detect(&self, frame: &Frame, image: &Image) -> Result<Vec<Box3D>> {
        UniBevFusion::detect(self, frame, image)
    }
}
