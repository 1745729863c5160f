use serde::{Deserialize, Serialize};

use super::anchors::{apply_direction, decode, Anchors};
use super::boxes::{bev_iou, Box3D};
use super::head::HeadTensors;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    /// Suppress across classes as well as within one.
    pub class_agnostic: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { score_threshold: 0.05, nms_iou: 0.2, pre_nms_top_k: 1000, max_detections: 100, class_agnostic: true }
    }
}

/// Greedy rotated BEV NMS. Boxes are visited by descending score (ties by
/// input order) and a box is dropped when its IoU with an already kept box is
/// at least `iou_threshold`. Returns the kept input indices in visit order.
pub fn rotated_nms(boxes: &[Box3D], iou_threshold: f64, class_agnostic: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].score.total_cmp(&boxes[a].score).then(a.cmp(&b)));
    let radius: Vec<f64> = boxes.iter().map(|b| 0.5 * b.dims[0].hypot(b.dims[1])).collect();
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let b = &boxes[i];
        let clash = kept.iter().any(|&k| {
            let o = &boxes[k];
            if !class_agnostic && o.class_id != b.class_id {
                return false;
            }
            let d = (o.center[0] - b.center[0]).hypot(o.center[1] - b.center[1]);
            d <= radius[i] + radius[k] && bev_iou(o, b) >= iou_threshold
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Turn raw head outputs into scored boxes: threshold, keep the top
/// candidates, decode against their anchors, fix heading with the direction
/// branch, then NMS.
pub fn decode_and_nms(head: &HeadTensors, anchors: &Anchors, cfg: &DecodeConfig) -> Vec<Box3D> {
    assert_eq!(head.num_anchors(), anchors.len(), "head does not match anchors");
    let mut cand: Vec<(usize, f64)> = (0..anchors.len())
        .filter_map(|i| {
            let s = sigmoid(head.cls_logit(i));
            (s >= cfg.score_threshold && s.is_finite()).then_some((i, s))
        })
        .collect();
    cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    cand.truncate(cfg.pre_nms_top_k);
    let boxes: Vec<Box3D> = cand
        .iter()
        .filter_map(|&(i, s)| {
            let mut b = decode(&head.box_deltas(i), &anchors.boxes[i]);
            let d = head.dir_logits(i);
            b.yaw = apply_direction(b.yaw, usize::from(d[1] > d[0]));
            let ok = b.dims.iter().all(|v| v.is_finite() && *v > 0.0) && b.center.iter().all(|v| v.is_finite());
            ok.then_some(b.with_score(s))
        })
        .collect();
    let mut keep = rotated_nms(&boxes, cfg.nms_iou, cfg.class_agnostic);
    keep.truncate(cfg.max_detections);
    keep.into_iter().map(|i| boxes[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{encode, AnchorSpec};
    use crate::geometry::BevGridSpec;
    use crate::nn::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook greedy NMS: repeatedly take the best remaining box and drop
    /// everything overlapping it.
    fn oracle(boxes: &[Box3D], thr: f64) -> Vec<usize> {
        let mut alive: Vec<usize> = (0..boxes.len()).collect();
        let mut out = Vec::new();
        while !alive.is_empty() {
            let mut best = 0;
            for j in 1..alive.len() {
                if boxes[alive[j]].score > boxes[alive[best]].score {
                    best = j;
                }
            }
            let top = alive.remove(best);
            out.push(top);
            alive.retain(|&j| bev_iou(&boxes[top], &boxes[j]) < thr);
        }
        out
    }

    fn random_boxes(n: usize, seed: u64) -> Vec<Box3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Box3D::new(
                    [rng.random_range(0.0..20.0), rng.random_range(-10.0..10.0), 0.8],
                    [rng.random_range(0.5..5.0), rng.random_range(0.5..2.0), 1.5],
                    rng.random_range(-3.2..3.2),
                    rng.random_range(0..3),
                )
                .with_score(rng.random_range(0.0..1.0))
            })
            .collect()
    }

    #[test]
    fn matches_brute_force() {
        for (n, seed) in [(200, 1), (350, 2), (500, 3)] {
            let boxes = random_boxes(n, seed);
            for thr in [0.1, 0.2, 0.5] {
                assert_eq!(rotated_nms(&boxes, thr, true), oracle(&boxes, thr), "n={n} thr={thr}");
            }
        }
    }

    #[test]
    fn duplicates_collapse_and_disjoint_survive() {
        let a = Box3D::new([5.0, 0.0, 0.8], [4.0, 1.7, 1.5], 0.2, 0);
        let boxes = vec![a.with_score(0.6), a.with_score(0.9), Box3D::new([15.0, 3.0, 0.8], [4.0, 1.7, 1.5], 0.0, 0).with_score(0.3)];
        assert_eq!(rotated_nms(&boxes, 0.2, true), vec![1, 2]);
        assert!(rotated_nms(&[], 0.2, true).is_empty());
        // Per-class mode keeps an overlapping box of another class.
        let mut other = a.with_score(0.5);
        other.class_id = 1;
        assert_eq!(rotated_nms(&[a.with_score(0.9), other], 0.2, false), vec![0, 1]);
        assert_eq!(rotated_nms(&[a.with_score(0.9), other], 0.2, true), vec![0]);
    }

    proptest! {
        #[test]
        fn kept_scores_descend_and_never_overlap(seed in 0u64..1000, n in 0usize..60) {
            let boxes = random_boxes(n, seed);
            let keep = rotated_nms(&boxes, 0.3, true);
            for w in keep.windows(2) {
                prop_assert!(boxes[w[0]].score >= boxes[w[1]].score);
            }
            for (x, &i) in keep.iter().enumerate() {
                for &j in &keep[x + 1..] {
                    prop_assert!(bev_iou(&boxes[i], &boxes[j]) < 0.3);
                }
            }
            // Every dropped box overlaps some kept box.
            for i in 0..n {
                if !keep.contains(&i) {
                    prop_assert!(keep.iter().any(|&k| bev_iou(&boxes[k], &boxes[i]) >= 0.3));
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn raising_score_threshold_never_adds_detections(seed in 0u64..500, lo in 0.0f64..0.5, step in 0.0f64..0.5) {
            let spec = AnchorSpec::vod();
            let grid = BevGridSpec::new((0.0, 6.4), (-3.2, 3.2), (-1.0, 4.0), (0.8, 0.8)).unwrap();
            let anchors = spec.generate(&grid);
            let head = HeadTensors {
                cls: crate::nn::random_tensor(&[6, 8, 8], -3.0, 2.0, seed),
                boxes: crate::nn::random_tensor(&[42, 8, 8], -0.5, 0.5, seed + 1),
                dir: crate::nn::random_tensor(&[12, 8, 8], -1.0, 1.0, seed + 2),
            };
            let at = |t: f64| decode_and_nms(&head, &anchors, &DecodeConfig { score_threshold: t, ..DecodeConfig::default() });
            let (a, b) = (at(lo), at(lo + step));
            prop_assert!(b.len() <= a.len());
            for w in a.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }
    }

    #[test]
    fn decodes_planted_prediction() {
        let spec = AnchorSpec::vod();
        let grid = BevGridSpec::new((0.0, 12.8), (-6.4, 6.4), (-1.0, 4.0), (0.8, 0.8)).unwrap();
        let anchors = spec.generate(&grid);
        let (a, n) = (6, 256);
        let mut head = HeadTensors {
            cls: Tensor::full(&[a, 16, 16], -8.0),
            boxes: Tensor::zeros(&[a * 7, 16, 16]),
            dir: Tensor::zeros(&[a * 2, 16, 16]),
        };
        let gt = Box3D::new([6.1, -1.3, 0.7], [4.2, 1.7, 1.5], -2.5, 0);
        let i = (8 * 16 + 7) * a;
        let res = encode(&gt, &anchors.boxes[i]);
        let (cell, slot) = anchors.split(i);
        head.cls.data_mut()[slot * n + cell] = 2.0;
        for k in 0..7 {
            head.boxes.data_mut()[(slot * 7 + k) * n + cell] = res[k];
        }
        // Yaw -2.5 lies in the lower half-plane.
        head.dir.data_mut()[(slot * 2 + 1) * n + cell] = 3.0;
        let dets = decode_and_nms(&head, &anchors, &DecodeConfig::default());
        assert_eq!(dets.len(), 1);
        let d = dets[0];
        assert!((d.score - sigmoid(2.0)).abs() < 1e-12);
        assert!((d.yaw - gt.yaw).abs() < 1e-9);
        assert!(bev_iou(&d, &gt) > 0.999);
        // Nothing clears a threshold above every score.
        let cfg = DecodeConfig { score_threshold: 0.95, ..DecodeConfig::default() };
        assert!(decode_and_nms(&head, &anchors, &cfg).is_empty());
    }
}
