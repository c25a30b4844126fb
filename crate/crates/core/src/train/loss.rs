//! Detection loss over a raw batch: objectness on every cell, class and box
//! terms on assigned cells, all normalised by the positive count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::BoxLabel;
use crate::error::{Error, Result};
use crate::head::{assign_targets, Assignment, RawPrediction, SIZE_LOGIT_CLAMP};
use crate::losses::{
    bce, ciou_loss, focal, giou_loss, hrl, l1_regulation, total_loss, ClsObjLoss, IouLoss, LossGrad, PredTargetBatch,
    Regulation, StageConfig,
};
use crate::nn::sigmoid;

/// Focal parameters used when a stage selects the focal loss.
pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub iou: f64,
    pub obj: f64,
    pub reg: f64,
    pub positives: usize,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.cls, self.iou, self.obj, self.reg].iter().all(|v| v.is_finite())
    }
}

fn cls_obj(kind: ClsObjLoss, p: Vec<f64>, t: Vec<f64>, rng: &mut impl Rng) -> Result<LossGrad> {
    match kind {
        ClsObjLoss::Bce => bce(&p, &t),
        ClsObjLoss::Focal => focal(&p, &t, FOCAL_GAMMA, FOCAL_ALPHA),
        ClsObjLoss::Hrl => {
            let r = (0..p.len()).map(|_| rng.random::<f64>()).collect();
            hrl(&PredTargetBatch::new(p, t, r)?)
        }
    }
}

/// Flat offset of channel `c` at a positive cell inside a raw map.
fn offset(raw: &RawPrediction, b: usize, a: &Assignment, c: usize) -> usize {
    let m = &raw.maps[a.cell.level];
    m.index([b, c, a.cell.gy, a.cell.gx])
}

/// Loss for `raw` against per-image labels in input coordinates, plus the
/// gradient w.r.t. every raw output. HRL draws come from `rng`.
pub fn detection_loss(
    raw: &RawPrediction,
    labels: &[Vec<BoxLabel>],
    input_hw: (usize, usize),
    stage: &StageConfig,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, RawPrediction)> {
    let n = raw.batch();
    if labels.len() != n {
        return Err(Error::shape("detection_loss", format!("{} label sets for batch {n}", labels.len())));
    }
    let nc = raw.num_classes();
    let assigned: Vec<Vec<Assignment>> = labels.iter().map(|l| assign_targets(l, &raw.strides, input_hw)).collect();
    let positives: usize = assigned.iter().map(Vec::len).sum();
    let norm = positives.max(1) as f64;
    let mut grad = raw.zeros_like();
    let w = stage.weights;

    // Objectness over every cell, in level, batch, channel-plane order.
    let mut p = Vec::new();
    let mut t = Vec::new();
    let mut obj_index = Vec::new();
    for (l, m) in raw.maps.iter().enumerate() {
        let plane = m.plane();
        for b in 0..n {
            let base = m.index([b, 4, 0, 0]);
            let start = p.len();
            p.extend(m.data()[base..base + plane].iter().map(|&v| sigmoid(v) as f64));
            t.extend(std::iter::repeat_n(0.0, plane));
            for a in assigned[b].iter().filter(|a| a.cell.level == l) {
                t[start + a.cell.gy * m.width() + a.cell.gx] = 1.0;
            }
            obj_index.push((l, base, start));
        }
    }
    let count = p.len() as f64;
    let probs = p.clone();
    let obj = cls_obj(stage.cls_obj_loss, p, t, rng)?;
    let obj_scale = count / norm;
    for &(l, base, start) in &obj_index {
        let plane = raw.maps[l].plane();
        let g = grad.maps[l].data_mut();
        for i in 0..plane {
            let q = probs[start + i];
            g[base + i] = (w.mu * obj_scale * obj.grad[start + i] * q * (1.0 - q)) as f32;
        }
    }

    let mut cls_loss = 0.0;
    let mut iou_loss = 0.0;
    let mut reg_loss = 0.0;
    if positives > 0 {
        let pos: Vec<(usize, &Assignment)> =
            assigned.iter().enumerate().flat_map(|(b, v)| v.iter().map(move |a| (b, a))).collect();
        let value = |b: usize, a: &Assignment, c: usize| raw.maps[a.cell.level].data()[offset(raw, b, a, c)];

        if nc > 0 {
            let mut p = Vec::with_capacity(pos.len() * nc);
            let mut t = Vec::with_capacity(pos.len() * nc);
            for &(b, a) in &pos {
                for c in 0..nc {
                    p.push(sigmoid(value(b, a, 5 + c)) as f64);
                    t.push(if c == a.class_id { 1.0 } else { 0.0 });
                }
            }
            let probs = p.clone();
            let lg = cls_obj(stage.cls_obj_loss, p, t, rng)?;
            let scale = probs.len() as f64 / norm;
            cls_loss = lg.loss * scale;
            for (k, &(b, a)) in pos.iter().enumerate() {
                for c in 0..nc {
                    let i = k * nc + c;
                    let q = probs[i];
                    let o = offset(raw, b, a, 5 + c);
                    grad.maps[a.cell.level].data_mut()[o] = (w.alpha * scale * lg.grad[i] * q * (1.0 - q)) as f32;
                }
            }
        }

        let mut reg_pred = Vec::with_capacity(pos.len() * 4);
        let mut reg_target = Vec::with_capacity(pos.len() * 4);
        for &(b, a) in &pos {
            let s = raw.strides[a.cell.level] as f64;
            let tv: [f64; 4] = std::array::from_fn(|c| value(b, a, c) as f64);
            let lim = SIZE_LOGIT_CLAMP as f64;
            let (tw, th) = (tv[2].clamp(-lim, lim), tv[3].clamp(-lim, lim));
            let cx = (a.cell.gx as f64 + tv[0]) * s;
            let cy = (a.cell.gy as f64 + tv[1]) * s;
            let (bw, bh) = (tw.exp() * s, th.exp() * s);
            let pred = [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0];
            let gt = labels[b][a.gt_index].bbox.to_f64();
            let bl = match stage.iou_loss {
                IouLoss::Giou => giou_loss(&pred, &gt)?,
                IouLoss::Ciou => ciou_loss(&pred, &gt)?,
            };
            iou_loss += bl.loss / norm;
            let g = bl.grad.map(|v| v * w.lambda / norm);
            let dw = if tv[2].abs() < lim { (g[2] - g[0]) / 2.0 * bw } else { 0.0 };
            let dh = if tv[3].abs() < lim { (g[3] - g[1]) / 2.0 * bh } else { 0.0 };
            let d = [(g[0] + g[2]) * s, (g[1] + g[3]) * s, dw, dh];
            let map = grad.maps[a.cell.level].data_mut();
            for c in 0..4 {
                map[offset(raw, b, a, c)] += d[c] as f32;
            }
            reg_pred.extend(tv);
            reg_target.extend(a.target.map(|v| v as f64));
        }

        if stage.regulation == Regulation::L1 {
            let lg = l1_regulation(&reg_pred, &reg_target)?;
            let scale = reg_pred.len() as f64 / norm;
            reg_loss = lg.loss * scale;
            for (k, &(b, a)) in pos.iter().enumerate() {
                for c in 0..4 {
                    let o = offset(raw, b, a, c);
                    grad.maps[a.cell.level].data_mut()[o] += (w.zeta * scale * lg.grad[k * 4 + c]) as f32;
                }
            }
        }
    }

    let obj_loss = obj.loss * obj_scale;
    let total = total_loss(cls_loss, iou_loss, obj_loss, reg_loss, &w);
    Ok((LossBreakdown { total, cls: cls_loss, iou: iou_loss, obj: obj_loss, reg: reg_loss, positives }, grad))
}
