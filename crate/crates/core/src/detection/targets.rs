use super::anchors::{dir_target, encode, AnchorSpec, Anchors, BOX_CODE_SIZE};
use super::boxes::{bev_iou, Box3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Positive,
    Negative,
    Ignore,
}

/// Per-anchor training targets for one frame.
#[derive(Clone, Debug)]
pub struct Targets {
    pub labels: Vec<Label>,
    /// `(anchor index, box residuals, direction bin)` for each positive.
    pub positives: Vec<(usize, [f64; BOX_CODE_SIZE], usize)>,
}

impl Targets {
    pub fn num_positives(&self) -> usize {
        self.positives.len()
    }

    /// Targets for a frame with no objects: every anchor negative.
    pub fn all_negative(num_anchors: usize) -> Self {
        Self { labels: vec![Label::Negative; num_anchors], positives: Vec::new() }
    }
}

/// Match anchors to same-class ground truth by rotated BEV IoU.
///
/// An anchor is positive when its best IoU reaches the class match threshold,
/// negative below the unmatch threshold and ignored in between. Each box also
/// claims its single best-overlapping anchor so small objects are never left
/// without a positive.
pub fn assign_targets(anchors: &Anchors, gts: &[Box3D], spec: &AnchorSpec) -> Targets {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt = vec![usize::MAX; n];
    let mut forced: Vec<Option<(usize, f64)>> = vec![None; gts.len()];
    let (ny, nx) = anchors.grid_shape;
    let grid = &anchors.grid;
    let (dx, dy) = grid.cell_size;
    let a = anchors.per_cell;
    let yaws = spec.yaws.len();
    for (gi, gt) in gts.iter().enumerate() {
        let cls = gt.class_id;
        let Some(cs) = spec.classes.get(cls) else { continue };
        let reach = 0.5 * (gt.dims[0].hypot(gt.dims[1]) + cs.anchor_dims[0].hypot(cs.anchor_dims[1]));
        let lo_x = ((gt.center[0] - reach - grid.x_range.0) / dx).floor().max(0.0) as usize;
        let hi_x = (((gt.center[0] + reach - grid.x_range.0) / dx).ceil().max(0.0) as usize).min(nx);
        let lo_y = ((gt.center[1] - reach - grid.y_range.0) / dy).floor().max(0.0) as usize;
        let hi_y = (((gt.center[1] + reach - grid.y_range.0) / dy).ceil().max(0.0) as usize).min(ny);
        for iy in lo_y..hi_y {
            for ix in lo_x..hi_x {
                for k in 0..yaws {
                    let i = (iy * nx + ix) * a + cls * yaws + k;
                    let iou = bev_iou(&anchors.boxes[i], gt);
                    if iou > best_iou[i] {
                        best_iou[i] = iou;
                        best_gt[i] = gi;
                    }
                    if iou > 0.0 && forced[gi].is_none_or(|(_, b)| iou > b) {
                        forced[gi] = Some((i, iou));
                    }
                }
            }
        }
    }
    let mut labels = vec![Label::Negative; n];
    for i in 0..n {
        let cs = &spec.classes[anchors.boxes[i].class_id];
        if best_gt[i] == usize::MAX {
            continue;
        }
        labels[i] = if best_iou[i] >= cs.match_iou {
            Label::Positive
        } else if best_iou[i] >= cs.unmatch_iou {
            Label::Ignore
        } else {
            Label::Negative
        };
    }
    for (gi, f) in forced.iter().enumerate() {
        if let Some((i, _)) = *f {
            labels[i] = Label::Positive;
            best_gt[i] = gi;
        }
    }
    let positives = (0..n)
        .filter(|&i| labels[i] == Label::Positive)
        .map(|i| {
            let gt = &gts[best_gt[i]];
            (i, encode(gt, &anchors.boxes[i]), dir_target(gt.yaw))
        })
        .collect();
    Targets { labels, positives }
}
