//! Confidence filtering, class-aware NMS, average precision and the
//! post-processing cost benchmark.

mod ap;
mod bench;

pub use ap::{
    coco_results_json, compute_ap, ClassAp, EvalResult, ImageDetections, ImageGroundTruth, COCO_IOU_THRESHOLDS,
};
pub use bench::{postprocess_bench, BenchReport};

use std::cmp::Ordering;

use crate::head::{decode, Detection, RawPrediction};

pub const DEFAULT_CONF_THRESHOLD: f32 = 0.25;
pub const DEFAULT_NMS_THRESHOLD: f32 = 0.65;

/// Keeps detections scoring at least `conf_thr`, in input order.
pub fn threshold_filter(cands: &[Detection], conf_thr: f32) -> Vec<Detection> {
    cands.iter().filter(|d| d.score >= conf_thr).copied().collect()
}

/// Descending score, ties broken by input position.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    order
}

/// Class-aware greedy NMS: within a class, a box is dropped when its IoU
/// with an already kept, higher-ranked box exceeds `iou_thr`. The result is
/// sorted by descending score.
pub fn nms(dets: &[Detection], iou_thr: f32) -> Vec<Detection> {
    let order = score_order(dets);
    let num_classes = dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0);
    let mut kept_by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut kept = Vec::new();
    for i in order {
        let d = &dets[i];
        let same = &mut kept_by_class[d.class_id];
        if same.iter().all(|&k| dets[k].bbox.iou(&d.bbox) <= iou_thr) {
            same.push(i);
            kept.push(*d);
        }
    }
    kept
}

/// Literal pairwise suppression, used as the oracle for [`nms`].
pub fn nms_reference(dets: &[Detection], iou_thr: f32) -> Vec<Detection> {
    let order = score_order(dets);
    let mut suppressed = vec![false; dets.len()];
    let mut out = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        out.push(dets[i]);
        for &j in &order[rank + 1..] {
            if dets[j].class_id == dets[i].class_id && dets[i].bbox.iou(&dets[j].bbox) > iou_thr {
                suppressed[j] = true;
            }
        }
    }
    out
}

/// Decode, threshold and NMS for every image in a raw batch.
pub fn postprocess(raw: &RawPrediction, conf_thr: f32, nms_thr: f32) -> Vec<Vec<Detection>> {
    decode(raw).into_iter().map(|c| nms(&threshold_filter(&c, conf_thr), nms_thr)).collect()
}
