use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};
use unibev_core::eval::{
    detect_frames, evaluate, failure_test, format_detections, ft_csv, scaled_size, sweep_csv, sweep_resolution, EvalConfig, EvalFrame, FtReport, Metrics, SweepRow,
};
use unibev_core::model::{ModelConfig, UniBevFusion};
use unibev_core::synth::{dataset_checksum, write_dataset, Dataset, DiskDataset, Frame, FrameSource};
use unibev_core::train::{load_model, StepLoss, TrainConfig, Trainer};

use crate::config::{output_path, ExperimentConfig, RoiChoice};
use crate::error::{io_err, CliError};

pub const CHECKPOINT_FILE: &str = "checkpoint.ubck";

fn ensure_dir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| io_err(p, e))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    write(path, s)
}

/// CSV with a leading `# config_hash` comment line.
fn write_csv(path: &Path, hash: &str, body: &str) -> Result<(), CliError> {
    write(path, format!("# config_hash {hash}\n{body}"))
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn open_frames(path: &Path, cfg: &ExperimentConfig) -> Result<(DiskDataset, Vec<Frame>), CliError> {
    let ds = DiskDataset::open(path)?;
    if ds.schema().name != cfg.model.schema {
        return Err(CliError::Incompatible(format!(
            "dataset {} uses radar schema `{}`, the model expects `{}`",
            path.display(),
            ds.schema().name,
            cfg.model.schema
        )));
    }
    let names = cfg.model.anchors.class_names();
    if ds.class_names() != names.as_slice() {
        return Err(CliError::Incompatible(format!("dataset classes {:?} differ from the model's {names:?}", ds.class_names())));
    }
    let frames = ds.load_all()?;
    if frames.is_empty() {
        return Err(CliError::Data(format!("dataset {} has no frames", path.display())));
    }
    Ok((ds, frames))
}

fn data_path(flag: Option<PathBuf>, cfg: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.cloned()).ok_or_else(|| CliError::Usage(format!("no {what} dataset: pass --data or set data.path")))
}

#[derive(Debug, Serialize)]
pub struct SynthSummary {
    pub config_hash: String,
    pub frames: usize,
    pub schema: String,
    pub extra_channels: Vec<String>,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub checksum: String,
}

pub fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<SynthSummary, CliError> {
    let seed = cfg.require_seed()?;
    let scene = cfg.scene(seed)?;
    let ds = Dataset::generate(&scene, cfg.synth.frames)?;
    ensure_dir(out)?;
    write_dataset(&ds, out)?;
    let summary = SynthSummary {
        config_hash: cfg.hash(),
        frames: ds.frames.len(),
        schema: scene.schema.name.clone(),
        extra_channels: scene.schema.extra_channels.iter().map(|c| c.name.clone()).collect(),
        class_names: scene.class_names(),
        seed,
        checksum: dataset_checksum(out)?,
    };
    info!("wrote {} frames to {}", summary.frames, out.display());
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub model_hash: String,
    pub steps: u64,
    pub frames: usize,
    pub final_loss: Option<StepLoss>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

pub struct TrainArgs {
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn train(cfg: &ExperimentConfig, args: TrainArgs, out: &Path, debug: bool) -> Result<TrainSummary, CliError> {
    cfg.require_seed()?;
    let data = data_path(args.data, cfg.data.path.as_ref(), "training")?;
    let (_, frames) = open_frames(&data, cfg)?;
    ensure_dir(out)?;
    let hash = cfg.hash();
    let mut trainer = match &args.resume {
        Some(ck) => Trainer::resume(ck, &cfg.model, cfg.train.clone())?,
        None => Trainer::new(UniBevFusion::new(cfg.model.clone())?, cfg.train.clone())?,
    };
    trainer.label = Some(hash.clone());
    write(&out.join("config.toml"), cfg.to_toml())?;

    let loss_path = out.join("loss.csv");
    let append = args.resume.is_some() && loss_path.exists();
    let file = fs::OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(&loss_path).map_err(|e| io_err(&loss_path, e))?;
    let mut file = std::io::BufWriter::new(file);
    if !append {
        use std::io::Write;
        writeln!(file, "# config_hash {hash}").map_err(|e| io_err(&loss_path, e))?;
    }
    let mut w = csv::WriterBuilder::new().has_headers(!append).from_writer(file);
    let mut last = None;
    let mut csv_err = None;
    let total = cfg.train.steps;
    info!("training {} frames from step {} to {total}", frames.len(), trainer.step());
    trainer.train(&frames, |s| {
        if csv_err.is_none() {
            csv_err = w.serialize(s).err();
        }
        if s.step % 100 == 0 || s.step == total {
            info!("step {:>6}/{total}  loss {:.4}", s.step, s.total);
        }
        last = Some(*s);
    })?;
    if let Some(e) = csv_err {
        return Err(CliError::Data(format!("{}: {e}", loss_path.display())));
    }
    w.flush().map_err(|e| io_err(&loss_path, e))?;

    let ck = out.join(CHECKPOINT_FILE);
    trainer.save_checkpoint(&ck)?;
    if debug {
        export_debug(&trainer.model, &frames[0], &out.join("debug"))?;
    }
    let summary = TrainSummary {
        config_hash: hash,
        model_hash: cfg.model.hash(),
        steps: trainer.step(),
        frames: frames.len(),
        final_loss: last,
        checkpoint: CHECKPOINT_FILE.into(),
        checkpoint_sha256: file_sha256(&ck)?,
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

/// Grayscale PNGs of the fusion camera weight (BEV, forward up) and the
/// expected depth per image-feature pixel.
pub fn export_debug(model: &UniBevFusion, frame: &Frame, dir: &Path) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let maps = model.debug_maps(frame)?;
    let (ny, nx) = maps.camera_weight.dims2();
    let bev = image::GrayImage::from_fn(ny as u32, nx as u32, |c, r| {
        // Row 0 is the far edge, column 0 the leftmost cell.
        let (ix, iy) = (nx - 1 - r as usize, ny - 1 - c as usize);
        image::Luma([(maps.camera_weight.data()[iy * nx + ix] * 255.0).round() as u8])
    });
    let d_max = model.config.rdl.bins.d_max;
    let (h, w) = maps.expected_depth.dims2();
    let depth = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(maps.expected_depth.data()[y as usize * w + x as usize] / d_max * 255.0).clamp(0.0, 255.0).round() as u8])
    });
    let save = |img: image::GrayImage, name: &str, scale: u32| {
        let path = dir.join(name);
        image::imageops::resize(&img, img.width() * scale, img.height() * scale, image::imageops::FilterType::Nearest)
            .save(&path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    save(bev, &format!("{}_fusion_camera_weight.png", frame.id), 4)?;
    save(depth, &format!("{}_expected_depth.png", frame.id), model.config.image_multiple() as u32)?;
    Ok(())
}

fn load_checked(path: &Path, cfg: &ExperimentConfig) -> Result<UniBevFusion, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(load_model(path, &cfg.model)?)
}

fn detect_all(model: &UniBevFusion, frames: &[Frame]) -> unibev_core::Result<Vec<EvalFrame>> {
    let images: Vec<_> = frames.iter().map(|f| f.image.clone()).collect();
    detect_frames(model, frames, &images)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub model_hash: String,
    pub checkpoint_sha256: String,
    pub dataset_checksum: String,
    pub frames: usize,
    pub eval: EvalConfig,
    pub all_area: Metrics,
    /// Present when a RoI was requested.
    pub roi: Option<Metrics>,
}

pub struct EvalArgs {
    pub data: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub save_detections: bool,
}

pub fn eval(cfg: &ExperimentConfig, args: EvalArgs, out: &Path, debug: bool) -> Result<EvalReport, CliError> {
    let data = data_path(args.data, cfg.data.eval_path.as_ref().or(cfg.data.path.as_ref()), "evaluation")?;
    let (_, frames) = open_frames(&data, cfg)?;
    let model = load_checked(&args.checkpoint, cfg)?;
    let names = model.class_names();
    let ev = detect_all(&model, &frames)?;
    let all_cfg = cfg.eval_config().with_roi(None);
    let all_area = evaluate(&ev, &names, &all_cfg)?;
    let roi = match cfg.eval.roi {
        RoiChoice::None => None,
        r => Some(evaluate(&ev, &names, &all_cfg.clone().with_roi(r.roi()))?),
    };
    ensure_dir(out)?;
    if args.save_detections {
        let text: String = frames.iter().zip(&ev).map(|(f, e)| format_detections(&f.id, &e.dets, &names)).collect::<unibev_core::Result<_>>()?;
        write(&out.join("detections.txt"), text)?;
    }
    if debug {
        export_debug(&model, &frames[0], &out.join("debug"))?;
    }
    let report = EvalReport {
        config_hash: cfg.hash(),
        model_hash: cfg.model.hash(),
        checkpoint_sha256: file_sha256(&args.checkpoint)?,
        dataset_checksum: dataset_checksum(&data)?,
        frames: frames.len(),
        eval: cfg.eval_config(),
        all_area,
        roi,
    };
    write_json(&out.join("metrics.json"), &report)?;
    write_csv(&out.join("metrics.csv"), &report.config_hash, &metrics_csv(&report)?)?;
    Ok(report)
}

/// Columns: `scope, class, num_gt, ap_3d, ap_bev`; a `mAP` row closes each scope.
pub fn metrics_csv(r: &EvalReport) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut rows = vec![["scope", "class", "num_gt", "ap_3d", "ap_bev"].map(String::from).to_vec()];
    for (scope, m) in std::iter::once(("all", &r.all_area)).chain(r.roi.as_ref().map(|m| ("roi", m))) {
        for (i, c) in m.class_names.iter().enumerate() {
            rows.push(vec![scope.into(), c.clone(), m.num_gt[i].to_string(), fmt(m.ap_3d[i]), fmt(m.ap_bev[i])]);
        }
        rows.push(vec![scope.into(), "mAP".into(), m.num_gt.iter().sum::<usize>().to_string(), fmt(m.map_3d), fmt(m.map_bev)]);
    }
    for row in rows {
        w.write_record(&row).map_err(|e| CliError::Internal(e.to_string()))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?).map_err(|e| CliError::Internal(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct FtOutput {
    pub config_hash: String,
    pub model_hash: String,
    pub checkpoint_sha256: String,
    pub roi: RoiChoice,
    pub report: FtReport,
}

pub fn ft(cfg: &ExperimentConfig, data: Option<PathBuf>, checkpoint: &Path, out: &Path) -> Result<FtOutput, CliError> {
    let seed = match cfg.ft.seed.or(cfg.seed) {
        Some(s) => s,
        None => return Err(CliError::Usage("field `seed` is required: set ft.seed or seed, or pass --seed".into())),
    };
    let data = data_path(data, cfg.data.eval_path.as_ref().or(cfg.data.path.as_ref()), "evaluation")?;
    let (_, frames) = open_frames(&data, cfg)?;
    let model = load_checked(checkpoint, cfg)?;
    let names = model.class_names();
    let report = failure_test(&model, &frames, &names, &cfg.eval_config(), &cfg.ft_config(seed))?;
    let output = FtOutput { config_hash: cfg.hash(), model_hash: cfg.model.hash(), checkpoint_sha256: file_sha256(checkpoint)?, roi: cfg.eval.roi, report };
    ensure_dir(out)?;
    write_json(&out.join("ft.json"), &output)?;
    write_csv(&out.join("ft.csv"), &output.config_hash, &ft_csv(&output.report)?)?;
    Ok(output)
}

#[derive(Debug, Serialize)]
pub struct SweepOutput {
    pub config_hash: String,
    pub steps: u64,
    pub rows: Vec<SweepRow>,
}

/// Train and evaluate the RDL-ablated and full models at each image scale.
pub fn sweep_res(cfg: &ExperimentConfig, data: Option<PathBuf>, eval_data: Option<PathBuf>, out: &Path) -> Result<SweepOutput, CliError> {
    cfg.require_seed()?;
    let train_path = data_path(data, cfg.data.path.as_ref(), "training")?;
    let eval_path = eval_data.or_else(|| cfg.data.eval_path.clone()).unwrap_or_else(|| train_path.clone());
    let (_, train_frames) = open_frames(&train_path, cfg)?;
    let (_, eval_frames) = open_frames(&eval_path, cfg)?;
    let steps = cfg.sweep.steps.unwrap_or(cfg.train.steps);
    let train_cfg = TrainConfig { steps, ..cfg.train.clone() };
    let eval_cfg = cfg.eval_config().with_roi(None);
    let names = cfg.model.anchors.class_names();
    let rows = sweep_resolution(&cfg.sweep.scales, |scale, rdl| {
        let size = scaled_size(cfg.model.image_size, scale, cfg.model.image_multiple())?;
        let mut mc: ModelConfig = cfg.model.clone();
        mc.image_size = size;
        mc.rdl.ablate_extras = !rdl;
        info!("sweep: scale {scale} ({}x{}), rdl {}", size.0, size.1, if rdl { "on" } else { "off" });
        let mut t = Trainer::new(UniBevFusion::new(mc)?, train_cfg.clone())?;
        t.train(&train_frames, |_| {})?;
        let ev = detect_all(&t.model, &eval_frames)?;
        Ok((size, evaluate(&ev, &names, &eval_cfg)?))
    })?;
    let output = SweepOutput { config_hash: cfg.hash(), steps, rows };
    ensure_dir(out)?;
    write_json(&out.join("sweep.json"), &output)?;
    write_csv(&out.join("sweep.csv"), &output.config_hash, &sweep_csv(&output.rows)?)?;
    Ok(output)
}

/// Output directory: the flag if given, else the config's, under the output root.
pub fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig, sub: Option<&str>) -> PathBuf {
    let base = flag.unwrap_or_else(|| match sub {
        Some(s) => cfg.output_dir.join(s),
        None => cfg.output_dir.clone(),
    });
    output_path(&base)
}
