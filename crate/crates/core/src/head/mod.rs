//! Anchor-free detection head: multi-scale forward, decode, one-positive
//! target assignment, and the toy detector built around it.

mod layers;
mod model;
mod spec;

pub use layers::HeadLayers;
pub use model::{build_toy_model, Block, DetectorSpec, ModelConfig, ToyModel};
pub use spec::{head_forward, HeadConfig, HeadKind, HeadSpec, LevelOutput, LevelSpec};

use crate::data::BoxLabel;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{sigmoid, Tensor};

/// Raw size logits are clamped to this magnitude before `exp`.
pub const SIZE_LOGIT_CLAMP: f32 = 8.0;
pub const DEFAULT_STRIDES: [usize; 3] = [8, 16, 32];

/// Per-stride raw head output, each `[N, 5 + C, H, W]` with channels
/// `tx, ty, tw, th, obj, class logits...`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawPrediction {
    pub strides: Vec<usize>,
    pub maps: Vec<Tensor>,
}

impl RawPrediction {
    pub fn batch(&self) -> usize {
        self.maps.first().map_or(0, Tensor::batch)
    }

    pub fn num_classes(&self) -> usize {
        self.maps.first().map_or(0, |m| m.channels().saturating_sub(5))
    }

    pub fn cell_count(&self) -> usize {
        self.maps.iter().map(|m| m.height() * m.width()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { strides: self.strides.clone(), maps: self.maps.iter().map(|m| Tensor::zeros(m.shape())).collect() }
    }

    pub fn max_abs_diff(&self, other: &RawPrediction) -> Result<f32> {
        if self.strides != other.strides || self.maps.len() != other.maps.len() {
            return Err(Error::shape("RawPrediction", "stride sets differ"));
        }
        let mut m = 0.0f32;
        for (a, b) in self.maps.iter().zip(&other.maps) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub class_id: usize,
}

/// Cell position of one candidate: `(level, gy, gx)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub level: usize,
    pub gy: usize,
    pub gx: usize,
}

/// Box from raw offsets at a cell.
pub fn decode_box(t: [f32; 4], gx: usize, gy: usize, stride: usize) -> BBox {
    let s = stride as f32;
    let cx = (gx as f32 + t[0]) * s;
    let cy = (gy as f32 + t[1]) * s;
    let w = t[2].clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp() * s;
    let h = t[3].clamp(-SIZE_LOGIT_CLAMP, SIZE_LOGIT_CLAMP).exp() * s;
    BBox::from_center(cx, cy, w, h)
}

/// Raw offsets that decode to `bbox` at a cell.
pub fn encode_box(bbox: &BBox, gx: usize, gy: usize, stride: usize) -> [f32; 4] {
    let s = stride as f32;
    let (cx, cy) = bbox.center();
    [cx / s - gx as f32, cy / s - gy as f32, (bbox.width() / s).ln(), (bbox.height() / s).ln()]
}

/// One candidate per grid cell, for every batch item, in level-major,
/// row-major cell order.
pub fn decode(raw: &RawPrediction) -> Vec<Vec<Detection>> {
    let nc = raw.num_classes();
    (0..raw.batch())
        .map(|b| {
            let mut out = Vec::with_capacity(raw.cell_count());
            for (map, &s) in raw.maps.iter().zip(&raw.strides) {
                let (h, w) = (map.height(), map.width());
                let item = map.item(b);
                let plane = h * w;
                for gy in 0..h {
                    for gx in 0..w {
                        let i = gy * w + gx;
                        let ch = |c: usize| item[c * plane + i];
                        let bbox = decode_box([ch(0), ch(1), ch(2), ch(3)], gx, gy, s);
                        let (mut best, mut best_logit) = (0, f32::NEG_INFINITY);
                        for c in 0..nc {
                            if ch(5 + c) > best_logit {
                                best_logit = ch(5 + c);
                                best = c;
                            }
                        }
                        let cls = if nc == 0 { 1.0 } else { sigmoid(best_logit) };
                        out.push(Detection { bbox, score: sigmoid(ch(4)) * cls, class_id: best });
                    }
                }
            }
            out
        })
        .collect()
}

/// Positive cell for one ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub cell: Cell,
    pub gt_index: usize,
    pub class_id: usize,
    /// Raw box target, the inverse of [`decode_box`].
    pub target: [f32; 4],
}

/// Level whose stride is nearest (in log₂) to `√(w·h)/4`; ties go to the
/// smaller stride.
pub fn assign_level(bbox: &BBox, strides: &[usize]) -> usize {
    let ideal = ((bbox.width() * bbox.height()).max(1e-12).sqrt() / 4.0).log2();
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for (l, &s) in strides.iter().enumerate() {
        let d = ((s as f32).log2() - ideal).abs();
        if d < best_d - 1e-6 {
            best = l;
            best_d = d;
        }
    }
    best
}

/// Assigns each gt to the cell containing its center at its level. When two
/// gts land on the same cell the smaller box keeps it.
pub fn assign_targets(gt: &[BoxLabel], strides: &[usize], input_hw: (usize, usize)) -> Vec<Assignment> {
    let mut by_cell: std::collections::BTreeMap<Cell, (f32, usize)> = Default::default();
    for (i, label) in gt.iter().enumerate() {
        if !label.bbox.is_valid() {
            continue;
        }
        let level = assign_level(&label.bbox, strides);
        let s = strides[level];
        let (gh, gw) = (input_hw.0.div_ceil(s), input_hw.1.div_ceil(s));
        let (cx, cy) = label.bbox.center();
        let gx = ((cx / s as f32).floor().max(0.0) as usize).min(gw - 1);
        let gy = ((cy / s as f32).floor().max(0.0) as usize).min(gh - 1);
        let area = label.bbox.area();
        let cell = Cell { level, gy, gx };
        match by_cell.get(&cell) {
            Some(&(a, j)) if a < area || (a == area && j < i) => {}
            _ => {
                by_cell.insert(cell, (area, i));
            }
        }
    }
    by_cell
        .into_iter()
        .map(|(cell, (_, i))| {
            let l = &gt[i];
            Assignment {
                cell,
                gt_index: i,
                class_id: l.class_id,
                target: encode_box(&l.bbox, cell.gx, cell.gy, strides[cell.level]),
            }
        })
        .collect()
}
