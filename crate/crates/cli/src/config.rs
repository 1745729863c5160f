//! Experiment configuration: a TOML file layered over a named preset, with
//! command-line overrides on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use unibev_core::detection::AnchorSpec;
use unibev_core::eval::{ApMode, EvalConfig, FtConfig, Roi, DEFAULT_SCALES, DEFAULT_SIGMA};
use unibev_core::geometry::CameraModel;
use unibev_core::model::ModelConfig;
use unibev_core::radar::RadarSchema;
use unibev_core::synth::SceneConfig;
use unibev_core::train::TrainConfig;

use crate::error::CliError;

/// Relative output paths are resolved against this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "UNIBEV_OUTPUT_ROOT";

pub const PRESETS: [&str; 3] = ["toy", "vod", "tj4d"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RoiChoice {
    #[default]
    None,
    VodCorridor,
}

impl RoiChoice {
    pub fn roi(self) -> Option<Roi> {
        match self {
            RoiChoice::None => None,
            RoiChoice::VodCorridor => Some(Roi::vod_corridor()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Training (and by default evaluation) dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Held-out dataset for evaluation-style commands.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_path: Option<PathBuf>,
}

/// Scene generator knobs exposed to `synth`; everything else follows the toy scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub objects_per_frame: (usize, usize),
    pub points_per_object: (usize, usize),
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ap_mode: ApMode,
    pub roi: RoiChoice,
    /// Per-class IoU thresholds; defaults to each anchor class's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iou_thresholds: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtSection {
    pub rhos: Vec<f64>,
    pub runs: usize,
    pub sigma: f64,
    /// Noise seed; defaults to the experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub scales: Vec<f64>,
    /// Training steps per sweep point; defaults to `train.steps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    /// Master seed. It replaces `model.init_seed` and `train.seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Bit-reproducible execution; off trades that for speed.
    pub deterministic: bool,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSection,
    pub ft: FtSection,
    pub sweep: SweepSection,
}

impl ExperimentConfig {
    /// Built-in preset. `schema` swaps the radar schema and its class list.
    pub fn builtin(preset: &str, schema: Option<&str>) -> Result<Self, CliError> {
        let mut model = ModelConfig::preset(preset).map_err(|e| CliError::Usage(format!("preset: {e}")))?;
        if let Some(s) = schema {
            RadarSchema::by_name(s).map_err(|e| CliError::Usage(format!("schema: {e}")))?;
            model.schema = s.to_string();
            model.anchors = if s == "tj4d" { AnchorSpec::tj4d() } else { AnchorSpec::vod() };
        }
        let scene = SceneConfig::toy(RadarSchema::vod());
        let ft = FtConfig::default();
        Ok(Self {
            preset: preset.to_string(),
            seed: None,
            deterministic: true,
            output_dir: PathBuf::from("runs").join(preset),
            data: DataConfig { path: None, eval_path: None },
            synth: SynthConfig { frames: 50, objects_per_frame: scene.objects_per_frame, points_per_object: scene.points_per_object, dropout: scene.dropout },
            model,
            train: TrainConfig::default(),
            eval: EvalSection { ap_mode: ApMode::R40, roi: RoiChoice::None, iou_thresholds: None },
            ft: FtSection { rhos: ft.rhos, runs: ft.runs, sigma: DEFAULT_SIGMA, seed: None },
            sweep: SweepSection { scales: DEFAULT_SCALES.to_vec(), steps: None },
        })
    }

    /// Layer `file` over its preset, then apply `overrides` (`dotted.key`, value).
    pub fn load(file: Option<&Path>, preset: Option<&str>, schema: Option<&str>, overrides: &[(String, toml::Value)]) -> Result<Self, CliError> {
        let user: toml::Table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        let preset = match preset {
            Some(p) => p.to_string(),
            None => match user.get("preset") {
                Some(toml::Value::String(s)) => s.clone(),
                Some(_) => return Err(CliError::Usage("field `preset` must be a string".into())),
                None => "toy".to_string(),
            },
        };
        let file_schema = user.get("model").and_then(|m| m.get("schema")).and_then(|s| s.as_str()).map(str::to_string);
        let schema = schema.map(str::to_string).or(file_schema);
        let base = Self::builtin(&preset, schema.as_deref())?;
        let mut table = toml::Table::try_from(&base).map_err(|e| CliError::Internal(format!("preset serialization: {e}")))?;
        merge(&mut table, user);
        table.insert("preset".into(), toml::Value::String(preset));
        for (key, value) in overrides {
            set_path(&mut table, key, value.clone())?;
        }
        let mut cfg: Self = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {}", e.message())))?;
        cfg.apply_seed();
        cfg.model = cfg.model.clone().deterministic(cfg.deterministic);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_seed(&mut self) {
        if let Some(s) = self.seed {
            self.model.init_seed = s;
            self.train.seed = s;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(CliError::Usage(format!("preset `{}` is not one of {PRESETS:?}", self.preset)));
        }
        fn field(name: &'static str) -> impl Fn(unibev_core::Error) -> CliError {
            move |e| CliError::Usage(format!("{name}: {e}"))
        }
        self.model.validate().map_err(field("model"))?;
        self.train.validate().map_err(field("train"))?;
        self.eval_config().validate().map_err(field("eval"))?;
        if let Some(t) = &self.eval.iou_thresholds {
            if t.len() != self.model.anchors.num_classes() {
                return Err(CliError::Usage(format!("eval.iou_thresholds needs {} entries", self.model.anchors.num_classes())));
            }
        }
        self.ft_config(0).validate().map_err(field("ft"))?;
        if self.sweep.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(CliError::Usage("sweep.scales must be positive".into()));
        }
        let (lo, hi) = self.synth.objects_per_frame;
        let (plo, phi) = self.synth.points_per_object;
        if lo > hi || plo > phi || !(0.0..=1.0).contains(&self.synth.dropout) {
            return Err(CliError::Usage("synth ranges must be ordered and dropout within [0, 1]".into()));
        }
        Ok(())
    }

    /// The seed, or a usage error naming the missing field.
    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Usage("field `seed` is required: set it in the config file or pass --seed".into()))
    }

    /// Digest of the resolved configuration, without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn eval_config(&self) -> EvalConfig {
        let mut e = EvalConfig::for_classes(&self.model.anchors.classes).with_roi(self.eval.roi.roi());
        if let Some(t) = &self.eval.iou_thresholds {
            e.iou_thresholds = t.clone();
        }
        e.ap_mode = self.eval.ap_mode;
        e
    }

    pub fn ft_config(&self, seed: u64) -> FtConfig {
        FtConfig { rhos: self.ft.rhos.clone(), runs: self.ft.runs, sigma: self.ft.sigma, base_seed: seed }
    }

    /// Synthetic scene on the model's grid, with a camera at the model's
    /// input size and the toy scene's field of view.
    pub fn scene(&self, seed: u64) -> Result<SceneConfig, CliError> {
        let schema = RadarSchema::by_name(&self.model.schema).map_err(|e| CliError::Usage(format!("model.schema: {e}")))?;
        let mut s = SceneConfig::toy(schema);
        let (h, w) = self.model.image_size;
        s.camera = CameraModel::forward_looking(w as f64 / 2.0, (h, w), 1.5).map_err(|e| CliError::Usage(format!("model.image_size: {e}")))?;
        s.grid = self.model.grid.clone();
        s.objects_per_frame = self.synth.objects_per_frame;
        s.points_per_object = self.synth.points_per_object;
        s.dropout = self.synth.dropout;
        s.seed = seed;
        s.validate().map_err(|e| CliError::Usage(format!("synth: {e}")))?;
        Ok(s)
    }
}

/// Resolve an output location: relative paths go under `$UNIBEV_OUTPUT_ROOT` when set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| CliError::Usage(format!("empty override key `{key}`")))?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Parse `key=value`, reading the value as TOML and falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for p in PRESETS {
            let cfg = ExperimentConfig::builtin(p, None).unwrap();
            let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn shipped_preset_files_match_builtins() {
        for p in PRESETS {
            let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets").join(format!("{p}.toml"));
            let text = std::fs::read_to_string(&path).unwrap();
            let parsed: ExperimentConfig = toml::from_str(&text).unwrap();
            assert_eq!(parsed, ExperimentConfig::builtin(p, None).unwrap(), "{}", path.display());
        }
    }

    #[test]
    fn file_values_then_flags_override_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "seed = 3\n[train]\nsteps = 40\nlr = 0.002\n").unwrap();
        let cfg = ExperimentConfig::load(Some(&path), None, None, &[parse_override("train.steps=7").unwrap()]).unwrap();
        assert_eq!(cfg.preset, "toy");
        assert_eq!(cfg.train.steps, 7);
        assert_eq!(cfg.train.lr, 0.002);
        assert_eq!((cfg.model.init_seed, cfg.train.seed), (3, 3));
        assert_eq!(cfg.model.image_size, (128, 192));
    }

    #[test]
    fn schema_flag_switches_classes() {
        let cfg = ExperimentConfig::load(None, Some("toy"), Some("tj4d"), &[]).unwrap();
        assert_eq!(cfg.model.anchors.class_names(), ["car", "pedestrian", "cyclist", "truck"]);
        assert_eq!(cfg.eval_config().iou_thresholds, vec![0.5, 0.25, 0.25, 0.5]);
    }

    #[test]
    fn bad_fields_are_usage_errors_naming_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "sed = 3\n").unwrap();
        let err = ExperimentConfig::load(Some(&path), None, None, &[]).unwrap_err();
        assert!(matches!(&err, CliError::Usage(m) if m.contains("sed")), "{err}");
        let err = ExperimentConfig::load(None, Some("kitti"), None, &[]).unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        let err = ExperimentConfig::load(None, None, None, &[parse_override("train.lr=-1").unwrap()]).unwrap_err();
        assert!(matches!(&err, CliError::Usage(m) if m.contains("train")), "{err}");
        let cfg = ExperimentConfig::load(None, None, None, &[]).unwrap();
        assert!(matches!(cfg.require_seed(), Err(CliError::Usage(m)) if m.contains("seed")));
    }

    #[test]
    fn hash_ignores_output_location_only() {
        let a = ExperimentConfig::load(None, None, None, &[parse_override("seed=1").unwrap()]).unwrap();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.train.steps += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn overrides_parse_as_toml_values() {
        assert_eq!(parse_override("a.b=3").unwrap(), ("a.b".into(), toml::Value::Integer(3)));
        assert_eq!(parse_override("x=[0.5, 1.0]").unwrap().1, toml::Value::Array(vec![0.5.into(), 1.0.into()]));
        assert_eq!(parse_override("roi=vod-corridor").unwrap().1, toml::Value::String("vod-corridor".into()));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn scene_follows_the_model_input() {
        let cfg = ExperimentConfig::load(None, Some("vod"), None, &[]).unwrap();
        let s = cfg.scene(1).unwrap();
        assert_eq!(s.camera.image_size, (608, 968));
        assert_eq!(s.grid, cfg.model.grid);
    }
}
