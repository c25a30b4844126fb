use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use super::{nms, threshold_filter, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::head::Detection;
use crate::nn::sigmoid;
use crate::rng::keyed;

/// Class count of the synthetic score arrays, sized like a COCO head.
const BENCH_CLASSES: usize = 80;
const BENCH_STRIDE: f32 = 8.0;
const ANCHOR_SIZES: [[f32; 2]; 3] = [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]];

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub cells: usize,
    pub anchors_per_cell: usize,
    pub candidates: usize,
    pub trials: usize,
    pub median_ms: f64,
    pub trial_ms: Vec<f64>,
    /// Detections left after NMS in the last trial.
    pub kept: usize,
}

impl BenchReport {
    pub fn table_row(&self) -> String {
        format!(
            "{:>8} {:>8} {:>11} {:>10.3} {:>6}",
            self.cells, self.anchors_per_cell, self.candidates, self.median_ms, self.kept
        )
    }

    pub fn table_header() -> &'static str {
        "   cells  anchors  candidates  median_ms   kept"
    }
}

/// Raw per-candidate outputs: 4 box logits, objectness and class logits.
fn synthetic_raw(candidates: usize, seed: u64) -> Vec<f32> {
    let stride = 5 + BENCH_CLASSES;
    let mut rng = keyed(seed, candidates as u64);
    let mut raw = vec![0.0f32; candidates * stride];
    for row in raw.chunks_exact_mut(stride) {
        for v in &mut row[..4] {
            *v = rng.random_range(-1.0..1.0);
        }
        // Roughly 2% of candidates clear the confidence threshold.
        row[4] = if rng.random_bool(0.02) { rng.random_range(1.0..4.0) } else { rng.random_range(-8.0..-2.0) };
        for v in &mut row[5..] {
            *v = rng.random_range(-6.0..3.0);
        }
    }
    raw
}

fn postprocess_raw(raw: &[f32], grid_w: usize, anchors: usize) -> Vec<Detection> {
    let stride = 5 + BENCH_CLASSES;
    let mut cands = Vec::with_capacity(raw.len() / stride);
    for (i, row) in raw.chunks_exact(stride).enumerate() {
        let cell = i / anchors;
        let (gx, gy) = ((cell % grid_w) as f32, (cell / grid_w) as f32);
        let (cls, best) =
            row[5..]
                .iter()
                .map(|&l| sigmoid(l))
                .enumerate()
                .fold((0, f32::MIN), |acc, (c, p)| if p > acc.1 { (c, p) } else { acc });
        let score = sigmoid(row[4]) * best;
        let [aw, ah] = if anchors == 1 { [BENCH_STRIDE, BENCH_STRIDE] } else { ANCHOR_SIZES[i % anchors] };
        let cx = (gx + 0.5 + row[0]) * BENCH_STRIDE;
        let cy = (gy + 0.5 + row[1]) * BENCH_STRIDE;
        let bbox = BBox::from_center(cx, cy, aw * row[2].exp(), ah * row[3].exp());
        cands.push(Detection { bbox, score, class_id: cls });
    }
    nms(&threshold_filter(&cands, DEFAULT_CONF_THRESHOLD), DEFAULT_NMS_THRESHOLD)
}

/// Times threshold, decode and NMS over `cells × anchors_per_cell`
/// synthetic candidates and reports the median over `trials`.
pub fn postprocess_bench(cells: usize, anchors_per_cell: usize, trials: usize, seed: u64) -> Result<BenchReport> {
    if cells == 0 {
        return Err(Error::invalid("cells", "must be positive"));
    }
    if anchors_per_cell == 0 || trials == 0 {
        return Err(Error::invalid("anchors_per_cell/trials", "must be positive"));
    }
    let candidates = cells * anchors_per_cell;
    let grid_w = (cells as f64).sqrt().ceil() as usize;
    let raw = synthetic_raw(candidates, seed);
    let mut kept = postprocess_raw(&raw, grid_w, anchors_per_cell).len();
    let mut trial_ms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t = Instant::now();
        kept = std::hint::black_box(postprocess_raw(std::hint::black_box(&raw), grid_w, anchors_per_cell)).len();
        trial_ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let mut sorted = trial_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let median_ms = sorted[sorted.len() / 2];
    Ok(BenchReport { cells, anchors_per_cell, candidates, trials, median_ms, trial_ms, kept })
}
