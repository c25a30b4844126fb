//! Split pre-process / inference / post-process execution with bounded
//! queues and in-order delivery, plus the sequential baseline.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use image::RgbImage;
use serde::Serialize;

use crate::data::{images_to_tensor, letterbox_image, LetterboxTransform};
use crate::error::{Error, Result};
use crate::head::{Detection, DetectorSpec, RawPrediction};
use crate::nn::Tensor;
use crate::postprocess::{postprocess, DEFAULT_CONF_THRESHOLD, DEFAULT_NMS_THRESHOLD};

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Network input `(w, h)`; both must be multiples of 32.
    pub input_size: (u32, u32),
    pub conf_thr: f32,
    pub nms_thr: f32,
    pub queue_capacity: usize,
    pub workers_per_stage: usize,
    /// Extra busy work added to every stage, for balanced-load benchmarks.
    pub stage_load: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            input_size: (320, 320),
            conf_thr: DEFAULT_CONF_THRESHOLD,
            nms_thr: DEFAULT_NMS_THRESHOLD,
            queue_capacity: 4,
            workers_per_stage: 1,
            stage_load: Duration::ZERO,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_size(self.input_size)?;
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity", "must be at least 1"));
        }
        if self.workers_per_stage == 0 {
            return Err(Error::invalid("workers_per_stage", "must be at least 1"));
        }
        Ok(())
    }
}

fn check_size((w, h): (u32, u32)) -> Result<()> {
    if w == 0 || h == 0 || w % 32 != 0 || h % 32 != 0 {
        return Err(Error::invalid("input_size", format!("{w}x{h} is not a positive multiple of 32")));
    }
    Ok(())
}

pub const STAGES: [&str; 3] = ["pre", "infer", "post"];

/// Stage entry/exit times in ms since the run started, indexed like [`STAGES`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimes(pub [[f64; 2]; 3]);

impl StageTimes {
    pub fn is_monotone(&self) -> bool {
        let flat: Vec<f64> = self.0.iter().flatten().copied().collect();
        flat.windows(2).all(|w| w[0] <= w[1])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub seq: u64,
    /// Boxes in source-frame coordinates.
    pub detections: Vec<Detection>,
    pub times: StageTimes,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RunStats {
    pub frames: usize,
    pub wall_s: f64,
    pub fps: f64,
    pub stage_median_ms: [f64; 3],
}

#[derive(Debug)]
pub struct PipelineRun {
    /// Completed frames in `seq` order: always the prefix `0..results.len()`.
    pub results: Vec<FrameResult>,
    pub stats: RunStats,
    /// Set when a stage failed; `results` then holds every frame before it.
    pub error: Option<Error>,
}

impl PipelineRun {
    pub fn is_partial(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineReport {
    pub frames: usize,
    pub input_size: (u32, u32),
    pub queue_capacity: usize,
    pub workers_per_stage: usize,
    pub sequential: Option<RunStats>,
    pub pipelined: Option<RunStats>,
    pub fps_sequential: Option<f64>,
    pub fps_pipelined: Option<f64>,
    /// `fps_pipelined / fps_sequential` when both ran.
    pub speedup: Option<f64>,
}

impl PipelineReport {
    pub fn new(config: &PipelineConfig, sequential: Option<RunStats>, pipelined: Option<RunStats>) -> Self {
        let frames = sequential.or(pipelined).map_or(0, |s| s.frames);
        let speedup = match (sequential, pipelined) {
            (Some(s), Some(p)) if s.fps > 0.0 => Some(p.fps / s.fps),
            _ => None,
        };
        Self {
            frames,
            input_size: config.input_size,
            queue_capacity: config.queue_capacity,
            workers_per_stage: config.workers_per_stage,
            fps_sequential: sequential.map(|s| s.fps),
            fps_pipelined: pipelined.map(|s| s.fps),
            sequential,
            pipelined,
            speedup,
        }
    }
}

fn spin(d: Duration) {
    if d.is_zero() {
        return;
    }
    let t = Instant::now();
    while t.elapsed() < d {
        std::hint::spin_loop();
    }
}

struct Pre {
    input: Tensor,
    transform: LetterboxTransform,
}

fn stage_pre(seq: u64, frame: &RgbImage, cfg: &PipelineConfig) -> Result<Pre> {
    if frame.width() == 0 || frame.height() == 0 {
        return Err(Error::Stage { stage: "pre", seq, message: "empty frame".into() });
    }
    let (img, transform) = letterbox_image(frame, cfg.input_size);
    let input = images_to_tensor(&[&img]).map_err(|e| Error::Stage { stage: "pre", seq, message: e.to_string() })?;
    spin(cfg.stage_load);
    Ok(Pre { input, transform })
}

fn stage_infer(seq: u64, pre: &Pre, model: &DetectorSpec, cfg: &PipelineConfig) -> Result<RawPrediction> {
    let raw = model.infer(&pre.input).map_err(|e| Error::Stage { stage: "infer", seq, message: e.to_string() })?;
    spin(cfg.stage_load);
    Ok(raw)
}

fn stage_post(raw: &RawPrediction, transform: &LetterboxTransform, cfg: &PipelineConfig) -> Vec<Detection> {
    let mut dets = postprocess(raw, cfg.conf_thr, cfg.nms_thr).pop().unwrap_or_default();
    for d in &mut dets {
        d.bbox = transform.invert_box(&d.bbox);
    }
    spin(cfg.stage_load);
    dets
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

fn stats(results: &[FrameResult], wall: Duration) -> RunStats {
    let wall_s = wall.as_secs_f64();
    let mut stage_median_ms = [0.0; 3];
    for (s, m) in stage_median_ms.iter_mut().enumerate() {
        let mut d: Vec<f64> = results.iter().map(|r| r.times.0[s][1] - r.times.0[s][0]).collect();
        if !d.is_empty() {
            d.sort_by(f64::total_cmp);
            *m = d[d.len() / 2];
        }
    }
    let fps = if wall_s > 0.0 { results.len() as f64 / wall_s } else { 0.0 };
    RunStats { frames: results.len(), wall_s, fps, stage_median_ms }
}

/// Processes frames one at a time on the calling thread.
pub fn run_sequential(frames: &[RgbImage], model: &DetectorSpec, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let start = Instant::now();
    let mut results = Vec::with_capacity(frames.len());
    let mut error = None;
    for (seq, frame) in (0u64..).zip(frames) {
        let mut times = StageTimes::default();
        let step = (|| {
            times.0[0][0] = ms_since(start);
            let pre = stage_pre(seq, frame, cfg)?;
            times.0[0][1] = ms_since(start);
            times.0[1][0] = times.0[0][1];
            let raw = stage_infer(seq, &pre, model, cfg)?;
            times.0[1][1] = ms_since(start);
            times.0[2][0] = times.0[1][1];
            let detections = stage_post(&raw, &pre.transform, cfg);
            times.0[2][1] = ms_since(start);
            Ok(detections)
        })();
        match step {
            Ok(detections) => results.push(FrameResult { seq, detections, times }),
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    let stats = stats(&results, start.elapsed());
    Ok(PipelineRun { results, stats, error })
}

struct Msg<T> {
    seq: u64,
    times: StageTimes,
    payload: Result<T>,
}

/// Runs one stage: forwards failures untouched and stamps entry/exit.
fn worker<A, B>(
    rx: Receiver<Msg<A>>,
    tx: Sender<Msg<B>>,
    stage: usize,
    start: Instant,
    f: impl Fn(u64, A) -> Result<B>,
) {
    for msg in rx {
        let mut times = msg.times;
        times.0[stage][0] = ms_since(start);
        let payload = msg.payload.and_then(|a| f(msg.seq, a));
        times.0[stage][1] = ms_since(start);
        if tx.send(Msg { seq: msg.seq, times, payload }).is_err() {
            return;
        }
    }
}

/// Three stages joined by bounded queues; the sink restores `seq` order.
/// Values are identical to [`run_sequential`]; only scheduling differs.
pub fn run_pipelined(frames: &[RgbImage], model: &DetectorSpec, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let cap = cfg.queue_capacity;
    let start = Instant::now();
    let stop = AtomicBool::new(false);
    let (src_tx, src_rx) = bounded::<Msg<&RgbImage>>(cap);
    let (pre_tx, pre_rx) = bounded::<Msg<Pre>>(cap);
    let (inf_tx, inf_rx) = bounded::<Msg<(RawPrediction, LetterboxTransform)>>(cap);
    let (out_tx, out_rx) = bounded::<Msg<Vec<Detection>>>(cap);

    let mut results = Vec::with_capacity(frames.len());
    let mut error: Option<(u64, Error)> = None;
    std::thread::scope(|s| {
        let stop = &stop;
        s.spawn(move || {
            for (seq, frame) in (0u64..).zip(frames) {
                // Blocks while the first queue is full.
                if stop.load(Ordering::Acquire)
                    || src_tx.send(Msg { seq, times: StageTimes::default(), payload: Ok(frame) }).is_err()
                {
                    return;
                }
            }
        });
        for _ in 0..cfg.workers_per_stage {
            let (rx, tx) = (src_rx.clone(), pre_tx.clone());
            s.spawn(move || worker(rx, tx, 0, start, |seq, f: &RgbImage| stage_pre(seq, f, cfg)));
            let (rx, tx) = (pre_rx.clone(), inf_tx.clone());
            s.spawn(move || {
                worker(rx, tx, 1, start, |seq, p: Pre| Ok((stage_infer(seq, &p, model, cfg)?, p.transform)))
            });
            let (rx, tx) = (inf_rx.clone(), out_tx.clone());
            s.spawn(move || {
                worker(rx, tx, 2, start, |_, (raw, t): (RawPrediction, LetterboxTransform)| {
                    Ok(stage_post(&raw, &t, cfg))
                })
            });
        }
        drop((src_rx, pre_tx, pre_rx, inf_tx, inf_rx, out_tx));

        let mut pending: BTreeMap<u64, Msg<Vec<Detection>>> = BTreeMap::new();
        let mut next = 0u64;
        for msg in out_rx {
            if msg.payload.is_err() {
                stop.store(true, Ordering::Release);
            }
            pending.insert(msg.seq, msg);
            while let Some(m) = pending.remove(&next) {
                match m.payload {
                    Ok(detections) if error.is_none() => {
                        results.push(FrameResult { seq: m.seq, detections, times: m.times })
                    }
                    Ok(_) => {}
                    Err(e) => {
                        if error.is_none() {
                            error = Some((m.seq, e));
                        }
                    }
                }
                next += 1;
            }
        }
        // Frames are ingested in order, so every seq below a failure arrives
        // before the queues close; anything left here follows the failure.
        for (seq, m) in pending {
            if let (Err(e), None) = (m.payload, &error) {
                error = Some((seq, e));
            }
        }
    });
    let stats = stats(&results, start.elapsed());
    Ok(PipelineRun { results, stats, error: error.map(|e| e.1) })
}

#[derive(Clone, Debug, Serialize)]
pub struct SizeRow {
    pub width: u32,
    pub height: u32,
    pub pixels: u64,
    pub fps: f64,
    /// Relative to the first row.
    pub pixel_ratio: f64,
    pub fps_ratio: f64,
}

/// Sequential end-to-end fps at each input size. Every size is checked
/// before anything runs.
pub fn bench_input_sizes(model: &DetectorSpec, sizes: &[(u32, u32)], frames: &[RgbImage]) -> Result<Vec<SizeRow>> {
    for &s in sizes {
        check_size(s)?;
    }
    if frames.is_empty() {
        return Err(Error::invalid("frames", "need at least one frame"));
    }
    let mut rows: Vec<SizeRow> = Vec::with_capacity(sizes.len());
    for &(w, h) in sizes {
        let cfg = PipelineConfig { input_size: (w, h), ..PipelineConfig::default() };
        let run = run_sequential(frames, model, &cfg)?;
        if let Some(e) = run.error {
            return Err(e);
        }
        let pixels = w as u64 * h as u64;
        let (p0, f0) = rows.first().map_or((pixels as f64, run.stats.fps), |r| (r.pixels as f64, r.fps));
        rows.push(SizeRow {
            width: w,
            height: h,
            pixels,
            fps: run.stats.fps,
            pixel_ratio: pixels as f64 / p0,
            fps_ratio: run.stats.fps / f0,
        });
    }
    Ok(rows)
}
