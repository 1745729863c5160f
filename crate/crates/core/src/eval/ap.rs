use serde::{Deserialize, Serialize};

use super::roi::{roi_filter, Roi};
use crate::detection::{bev_iou, iou_3d, Box3D, ClassSpec};
use crate::error::{Error, Result};
use crate::geometry::CameraModel;

/// Recall positions used to interpolate precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// 40 positions `1/40, ..., 1`.
    #[default]
    R40,
    /// 11 positions `0, 0.1, ..., 1`.
    R11,
}

impl ApMode {
    pub fn recall_points(self) -> Vec<f64> {
        match self {
            ApMode::R40 => (1..=40).map(|k| k as f64 / 40.0).collect(),
            ApMode::R11 => (0..=10).map(|k| k as f64 / 10.0).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouKind {
    Bev,
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouKind {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouKind::Bev => bev_iou(a, b),
            IouKind::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// True-positive IoU per class id.
    pub iou_thresholds: Vec<f64>,
    pub roi: Option<Roi>,
    #[serde(default)]
    pub ap_mode: ApMode,
}

impl EvalConfig {
    /// Per-class thresholds taken from the anchor classes.
    pub fn for_classes(classes: &[ClassSpec]) -> Self {
        Self { iou_thresholds: classes.iter().map(|c| c.eval_iou).collect(), roi: None, ap_mode: ApMode::R40 }
    }

    /// One threshold for every class.
    pub fn uniform(num_classes: usize, iou: f64) -> Self {
        Self { iou_thresholds: vec![iou; num_classes], roi: None, ap_mode: ApMode::R40 }
    }

    pub fn with_roi(mut self, roi: Option<Roi>) -> Self {
        self.roi = roi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return Err(Error::config(format!("IoU threshold {t} outside (0, 1]")));
        }
        if let Some(r) = &self.roi {
            r.validate()?;
        }
        Ok(())
    }
}

/// Detections and ground truth of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFrame {
    pub dets: Vec<Box3D>,
    pub gts: Vec<Box3D>,
    pub camera: CameraModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub class_names: Vec<String>,
    pub num_gt: Vec<usize>,
    /// `None` for classes without ground truth.
    pub ap_3d: Vec<Option<f64>>,
    pub ap_bev: Vec<Option<f64>>,
    /// Mean over classes with ground truth; `None` when no class has any.
    pub map_3d: Option<f64>,
    pub map_bev: Option<f64>,
}

/// Greedy matching in descending score order; each detection takes the
/// unmatched ground truth it overlaps most, if that reaches `iou_thr`.
/// Returns per-detection TP flags in that order and the GT count.
fn match_class(frames: &[EvalFrame], iou_thr: f64, class_id: usize, kind: IouKind) -> (Vec<bool>, usize) {
    let mut dets: Vec<(f64, usize, usize)> = Vec::new();
    let mut num_gt = 0;
    for (fi, f) in frames.iter().enumerate() {
        num_gt += f.gts.iter().filter(|g| g.class_id == class_id).count();
        for (di, d) in f.dets.iter().enumerate() {
            if d.class_id == class_id {
                dets.push((d.score, fi, di));
            }
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used: Vec<Vec<bool>> = frames.iter().map(|f| vec![false; f.gts.len()]).collect();
    let tp = dets
        .iter()
        .map(|&(_, fi, di)| {
            let d = &frames[fi].dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in frames[fi].gts.iter().enumerate() {
                if g.class_id != class_id || used[fi][gi] {
                    continue;
                }
                let iou = kind.iou(d, g);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                used[fi][gi] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (tp, num_gt)
}

/// Interpolated AP from a ranked TP sequence.
pub fn ap_from_ranked(tp: &[bool], num_gt: usize, mode: ApMode) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Suffix maximum gives the interpolated precision envelope.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let points = mode.recall_points();
    let mut sum = 0.0;
    let mut k = 0;
    for r in &points {
        while k < recall.len() && recall[k] < *r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / points.len() as f64
}

/// AP of one class over all frames; `None` when the class has no ground truth.
pub fn average_precision(frames: &[EvalFrame], iou_thr: f64, class_id: usize, kind: IouKind, mode: ApMode) -> Option<f64> {
    let (tp, num_gt) = match_class(frames, iou_thr, class_id, kind);
    (num_gt > 0).then(|| ap_from_ranked(&tp, num_gt, mode))
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let d: Vec<f64> = v.iter().flatten().copied().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-class AP and mAP in 3D and BEV. The RoI, when set, filters detections
/// and ground truth alike.
pub fn evaluate(frames: &[EvalFrame], class_names: &[String], cfg: &EvalConfig) -> Result<Metrics> {
    cfg.validate()?;
    if cfg.iou_thresholds.len() != class_names.len() {
        return Err(Error::config(format!("{} IoU thresholds for {} classes", cfg.iou_thresholds.len(), class_names.len())));
    }
    let filtered;
    let frames = match &cfg.roi {
        Some(roi) => {
            filtered = frames
                .iter()
                .map(|f| EvalFrame { dets: roi_filter(&f.dets, roi, &f.camera), gts: roi_filter(&f.gts, roi, &f.camera), camera: f.camera.clone() })
                .collect::<Vec<_>>();
            &filtered[..]
        }
        None => frames,
    };
    let n = class_names.len();
    let mut num_gt = vec![0; n];
    for f in frames {
        for g in &f.gts {
            if g.class_id >= n {
                return Err(Error::InvalidInput(format!("ground-truth class id {} out of range", g.class_id)));
            }
            num_gt[g.class_id] += 1;
        }
    }
    let ap = |kind| -> Vec<Option<f64>> { (0..n).map(|c| average_precision(frames, cfg.iou_thresholds[c], c, kind, cfg.ap_mode)).collect() };
    let (ap_3d, ap_bev) = (ap(IouKind::ThreeD), ap(IouKind::Bev));
    for (c, name) in class_names.iter().enumerate() {
        if num_gt[c] == 0 {
            log::warn!("class `{name}` has no ground truth; excluded from mAP");
        }
    }
    Ok(Metrics { class_names: class_names.to_vec(), num_gt, map_3d: mean_defined(&ap_3d), map_bev: mean_defined(&ap_bev), ap_3d, ap_bev })
}
