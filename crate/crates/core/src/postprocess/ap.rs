use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::BoxLabel;
use crate::error::{Error, Result};
use crate::head::Detection;

pub const COCO_IOU_THRESHOLDS: [f32; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDetections {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageGroundTruth {
    pub image_id: u64,
    pub labels: Vec<BoxLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub num_gt: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// `(iou_threshold, AP)` in the order requested.
    pub ap_per_iou: Vec<(f32, f64)>,
    /// AP at IoU 0.5; NaN when 0.5 was not among the thresholds.
    pub ap50: f64,
    /// Mean of `ap_per_iou`.
    pub ap50_95: f64,
    /// Only classes with at least one ground truth box.
    pub per_class: Vec<ClassAp>,
    /// `(name, AP averaged over thresholds)` for COCO area ranges that
    /// contain ground truth.
    pub by_area: Vec<(String, f64)>,
}

/// 101-point interpolated AP for one class from score-ordered TP flags.
fn interpolated_ap(tp: &[bool], num_gt: usize) -> f64 {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            let idx = recall.partition_point(|&x| x < r - 1e-12);
            precision.get(idx).copied().unwrap_or(0.0)
        })
        .sum::<f64>()
        / 101.0
}

struct Indexed<'a> {
    /// Per image: ground-truth labels.
    gts: Vec<&'a [BoxLabel]>,
    /// All detections as `(image index, detection)`.
    dets: Vec<(usize, &'a Detection)>,
}

fn index<'a>(dets: &'a [ImageDetections], gts: &'a [ImageGroundTruth]) -> Result<Indexed<'a>> {
    let pos: HashMap<u64, usize> = gts.iter().enumerate().map(|(i, g)| (g.image_id, i)).collect();
    let mut flat = Vec::new();
    for d in dets {
        let i = *pos.get(&d.image_id).ok_or(Error::UnknownImage(d.image_id))?;
        flat.extend(d.detections.iter().map(|x| (i, x)));
    }
    Ok(Indexed { gts: gts.iter().map(|g| g.labels.as_slice()).collect(), dets: flat })
}

/// AP of one class at one threshold; `None` when the class has no ground truth.
fn class_ap(ix: &Indexed<'_>, class: usize, thr: f32, keep: &dyn Fn(f32) -> bool) -> Option<f64> {
    let gt: Vec<Vec<(usize, &BoxLabel)>> = ix
        .gts
        .iter()
        .map(|g| g.iter().enumerate().filter(|(_, l)| l.class_id == class && keep(l.bbox.area())).collect())
        .collect();
    let num_gt: usize = gt.iter().map(Vec::len).sum();
    if num_gt == 0 {
        return None;
    }
    let mut dets: Vec<&(usize, &Detection)> =
        ix.dets.iter().filter(|(_, d)| d.class_id == class && keep(d.bbox.area())).collect();
    // Stable sort keeps input order among equal scores.
    dets.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap_or(Ordering::Equal));
    let mut matched: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
    let tp: Vec<bool> = dets
        .iter()
        .map(|(img, d)| {
            let mut best = None;
            let mut best_iou = thr;
            for (k, (_, l)) in gt[*img].iter().enumerate() {
                if matched[*img][k] {
                    continue;
                }
                let iou = d.bbox.iou(&l.bbox);
                if iou >= best_iou {
                    best_iou = iou;
                    best = Some(k);
                }
            }
            if let Some(k) = best {
                matched[*img][k] = true;
            }
            best.is_some()
        })
        .collect();
    Some(interpolated_ap(&tp, num_gt))
}

fn classes_of(ix: &Indexed<'_>) -> Vec<usize> {
    let mut c: Vec<usize> = ix.gts.iter().flat_map(|g| g.iter().map(|l| l.class_id)).collect();
    c.sort_unstable();
    c.dedup();
    c
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// COCO-style AP: greedy matching by descending score, 101-point
/// interpolation, averaged over classes that have ground truth.
pub fn compute_ap(dets: &[ImageDetections], gts: &[ImageGroundTruth], iou_thresholds: &[f32]) -> Result<EvalResult> {
    if iou_thresholds.is_empty() || iou_thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::invalid("iou_thresholds", "need at least one threshold in [0, 1]"));
    }
    let ix = index(dets, gts)?;
    let classes = classes_of(&ix);
    let all = |_: f32| true;
    // table[t][k]: AP of classes[k] at iou_thresholds[t].
    let table: Vec<Vec<f64>> = iou_thresholds
        .par_iter()
        .map(|&t| classes.iter().map(|&c| class_ap(&ix, c, t, &all).unwrap_or(0.0)).collect())
        .collect();
    let ap_per_iou: Vec<(f32, f64)> =
        iou_thresholds.iter().zip(&table).map(|(&t, row)| (t, mean(row.iter().copied()))).collect();
    let ap50 = ap_per_iou.iter().find(|(t, _)| (*t - 0.5).abs() < 1e-6).map_or(f64::NAN, |p| p.1);
    let ap50_95 = mean(ap_per_iou.iter().map(|p| p.1));
    let per_class = classes
        .iter()
        .enumerate()
        .map(|(k, &c)| ClassAp {
            class_id: c,
            num_gt: ix.gts.iter().map(|g| g.iter().filter(|l| l.class_id == c).count()).sum(),
            ap50: iou_thresholds.iter().position(|t| (*t - 0.5).abs() < 1e-6).map_or(f64::NAN, |t| table[t][k]),
            ap50_95: mean(table.iter().map(|row| row[k])),
        })
        .collect();
    let strata: [(&str, f32, f32); 3] =
        [("small", 0.0, 32.0 * 32.0), ("medium", 32.0 * 32.0, 96.0 * 96.0), ("large", 96.0 * 96.0, f32::INFINITY)];
    let by_area = strata
        .iter()
        .filter_map(|&(name, lo, hi)| {
            let keep = move |a: f32| a >= lo && a < hi;
            let per_t: Vec<f64> = iou_thresholds
                .iter()
                .filter_map(|&t| {
                    let aps: Vec<f64> = classes.iter().filter_map(|&c| class_ap(&ix, c, t, &keep)).collect();
                    (!aps.is_empty()).then(|| mean(aps.into_iter()))
                })
                .collect();
            (!per_t.is_empty()).then(|| (name.to_string(), mean(per_t.into_iter())))
        })
        .collect();
    Ok(EvalResult { ap_per_iou, ap50, ap50_95, per_class, by_area })
}

/// COCO results format; category ids are 1-based like the written
/// annotation files.
pub fn coco_results_json(dets: &[ImageDetections]) -> serde_json::Value {
    let rows: Vec<serde_json::Value> = dets
        .iter()
        .flat_map(|img| {
            img.detections.iter().map(move |d| {
                serde_json::json!({
                    "image_id": img.image_id,
                    "category_id": d.class_id + 1,
                    "bbox": [d.bbox.x1, d.bbox.y1, d.bbox.width(), d.bbox.height()],
                    "score": d.score,
                })
            })
        })
        .collect();
    serde_json::Value::Array(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn gt(id: u64, boxes: &[BBox]) -> ImageGroundTruth {
        ImageGroundTruth { image_id: id, labels: boxes.iter().map(|&b| BoxLabel::new(0, b)).collect() }
    }

    fn dets(id: u64, d: &[(BBox, f32)]) -> ImageDetections {
        ImageDetections {
            image_id: id,
            detections: d.iter().map(|&(bbox, score)| Detection { bbox, score, class_id: 0 }).collect(),
        }
    }

    const G: BBox = BBox::new(0.0, 0.0, 10.0, 10.0);
    const NEAR: BBox = BBox::new(0.0, 0.0, 10.0, 9.0);
    const FAR: BBox = BBox::new(50.0, 50.0, 60.0, 60.0);

    #[test]
    fn perfect_and_missing() {
        let r = compute_ap(&[dets(1, &[(NEAR, 1.0)])], &[gt(1, &[G])], &[0.5]).unwrap();
        assert_eq!(r.ap50, 1.0);
        let r = compute_ap(&[], &[gt(1, &[G])], &[0.5]).unwrap();
        assert_eq!(r.ap50, 0.0);
    }

    #[test]
    fn false_positive_ordering() {
        let r = compute_ap(&[dets(1, &[(NEAR, 0.9), (FAR, 0.8)])], &[gt(1, &[G])], &[0.5]).unwrap();
        assert_eq!(r.ap50, 1.0);
        let r = compute_ap(&[dets(1, &[(NEAR, 0.8), (FAR, 0.9)])], &[gt(1, &[G])], &[0.5]).unwrap();
        assert!((r.ap50 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_image_is_error() {
        assert!(matches!(compute_ap(&[dets(7, &[(G, 0.5)])], &[gt(1, &[G])], &[0.5]), Err(Error::UnknownImage(7))));
    }

    #[test]
    fn ap50_95_is_mean_of_thresholds() {
        let r = compute_ap(&[dets(1, &[(NEAR, 0.9)])], &[gt(1, &[G])], &COCO_IOU_THRESHOLDS).unwrap();
        // IoU 0.9: matched up to and including threshold 0.9.
        assert_eq!(r.ap_per_iou.iter().filter(|p| p.1 == 1.0).count(), 9);
        assert!((r.ap50_95 - 0.9).abs() < 1e-12);
        assert_eq!(r.by_area, vec![("small".to_string(), 0.9)]);
    }
}
