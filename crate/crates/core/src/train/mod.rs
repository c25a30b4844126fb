//! Toy training loop: synthetic shapes, the three-stage loss schedule,
//! warm-up learning rate, augmentation and periodic evaluation.

mod loss;

pub use loss::{detection_loss, LossBreakdown, FOCAL_ALPHA, FOCAL_GAMMA};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{enhanced_mosaic_mixup, filter_valid_labels, AugmentConfig};
use crate::data::{gen_shapes, images_to_tensor, letterbox, letterbox_image, Dataset, Sample, ShapesConfig};
use crate::error::{Error, Result};
use crate::head::{DetectorSpec, HeadKind, ModelConfig, ToyModel};
use crate::io::write_atomic;
use crate::losses::{lr_at, stage_config, LossWeights, StageConfig, TrainSchedule};
use crate::nn::{sgd_step, Mode, Module, OptimState};
use crate::postprocess::{compute_ap, postprocess, EvalResult, ImageDetections, ImageGroundTruth, COCO_IOU_THRESHOLDS};
use crate::rng::{derive_seed, fnv1a, keyed};

/// Confidence floor for AP evaluation; low so the PR curve reaches high recall.
pub const EVAL_CONF_THRESHOLD: f32 = 0.01;
const EVAL_BATCH: usize = 16;

/// Everything a toy run needs. Keys are flat so the file reads like a
/// hyper-parameter list; augmentation keys sit at the top level too.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: u32,
    pub max_objects: usize,
    pub min_side: u32,
    pub max_side: u32,
    pub width_mult: f32,
    pub head_kind: HeadKind,
    pub head_channels: Option<usize>,
    pub total_epochs: usize,
    pub stage2_start_epoch: usize,
    pub stage3_start_epoch: usize,
    pub warmup_epochs: usize,
    pub lr_per_img: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Evaluate on the held-out split every this many epochs (0 = only at the end).
    pub eval_every: usize,
    pub eval_conf_thr: f32,
    pub nms_thr: f32,
    /// Caps optimizer steps per epoch; for smoke runs.
    pub max_steps_per_epoch: Option<usize>,
    #[serde(flatten)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shapes = ShapesConfig::default();
        Self {
            seed: 0,
            train_images: 2000,
            val_images: 400,
            image_size: shapes.image_size,
            max_objects: shapes.max_objects,
            min_side: shapes.min_side,
            max_side: shapes.max_side,
            width_mult: 0.5,
            head_kind: HeadKind::Lite,
            head_channels: None,
            total_epochs: 30,
            stage2_start_epoch: 20,
            stage3_start_epoch: 24,
            warmup_epochs: 5,
            lr_per_img: TrainSchedule::LR_PER_IMAGE,
            batch_size: 16,
            momentum: 0.9,
            weight_decay: 0.0005,
            loss_weights: LossWeights::default(),
            eval_every: 5,
            eval_conf_thr: EVAL_CONF_THRESHOLD,
            nms_thr: crate::postprocess::DEFAULT_NMS_THRESHOLD,
            max_steps_per_epoch: None,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            total_epochs: self.total_epochs,
            stage2_start_epoch: self.stage2_start_epoch,
            stage3_start_epoch: self.stage3_start_epoch,
            warmup_epochs: self.warmup_epochs,
            lr_per_image: self.lr_per_img,
            batch_size: self.batch_size,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            weights: self.loss_weights,
        }
    }

    pub fn model_config(&self, num_classes: usize) -> ModelConfig {
        ModelConfig {
            num_classes,
            width_mult: self.width_mult,
            head_kind: self.head_kind,
            head_channels: self.head_channels,
        }
    }

    fn shapes(&self, n_images: usize, split: &str) -> ShapesConfig {
        ShapesConfig {
            n_images,
            image_size: self.image_size,
            max_objects: self.max_objects,
            min_side: self.min_side,
            max_side: self.max_side,
            seed: derive_seed(self.seed, split),
        }
    }

    pub fn train_shapes(&self) -> ShapesConfig {
        self.shapes(self.train_images, "train")
    }

    pub fn val_shapes(&self) -> ShapesConfig {
        self.shapes(self.val_images, "val")
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        self.loss_weights.validate()?;
        self.augment.validate()?;
        self.model_config(1).validate()?;
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return Err(Error::invalid("image_size", format!("{} is not a positive multiple of 32", self.image_size)));
        }
        if self.train_images < self.batch_size {
            return Err(Error::invalid("train_images", "fewer images than one batch"));
        }
        if self.val_images == 0 {
            return Err(Error::invalid("val_images", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap50: f64,
    pub ap50_95: f64,
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub stage: StageConfig,
    /// Set on the first epoch of a stage, describing what changed.
    pub stage_transition: Option<String>,
    pub steps: usize,
    pub lr_first: f64,
    pub lr_last: f64,
    /// Means over the epoch's steps.
    pub loss: LossBreakdown,
    /// Hash of the probe image as this epoch's input transform renders it.
    pub input_hash: String,
    pub eval: Option<EvalSummary>,
    pub seconds: f64,
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub history: Vec<EpochMetrics>,
    /// Held-out evaluation of the final, fused model.
    pub final_eval: EvalResult,
}

fn describe_start(s: &StageConfig) -> String {
    let on = if s.augmentation_enabled { "on" } else { "off" };
    format!(
        "stage {} start, cls/obj {}, iou {}, regulation {}, augmentation {on}",
        s.stage,
        name(&s.cls_obj_loss),
        name(&s.iou_loss),
        name(&s.regulation)
    )
}

fn describe_transition(prev: &StageConfig, next: &StageConfig) -> String {
    let mut parts = vec![format!("stage {} -> {}", prev.stage, next.stage)];
    if prev.cls_obj_loss != next.cls_obj_loss {
        parts.push(format!("cls/obj {} -> {}", name(&prev.cls_obj_loss), name(&next.cls_obj_loss)));
    }
    if prev.iou_loss != next.iou_loss {
        parts.push(format!("iou {} -> {}", name(&prev.iou_loss), name(&next.iou_loss)));
    }
    if prev.regulation != next.regulation {
        parts.push(format!("regulation {} -> {}", name(&prev.regulation), name(&next.regulation)));
    }
    if prev.augmentation_enabled != next.augmentation_enabled {
        let on = |b: bool| if b { "on" } else { "off" };
        parts.push(format!("augmentation {} -> {}", on(prev.augmentation_enabled), on(next.augmentation_enabled)));
    }
    parts.join(", ")
}

/// Lower-case name matching the serialised form of a unit enum.
fn name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// One network input: augmented when `augment` is set, letterboxed otherwise.
/// `primary` always contributes; the remaining mosaic sources are drawn from `rng`.
fn build_sample(
    data: &Dataset,
    primary: usize,
    augment: Option<&AugmentConfig>,
    size: u32,
    rng: &mut impl Rng,
) -> Result<Sample> {
    let Some(cfg) = augment else {
        return Ok(letterbox(&data.samples[primary], (size, size)).0);
    };
    let mut pick = || data.samples[rng.random_range(0..data.len())].clone();
    let mut groups: Vec<Vec<Sample>> = Vec::with_capacity(cfg.mosaic_groups);
    for g in 0..cfg.mosaic_groups {
        let first = if g == 0 { data.samples[primary].clone() } else { pick() };
        let mut group = vec![first];
        group.extend((0..3).map(|_| pick()));
        groups.push(group);
    }
    let last = pick();
    let out = enhanced_mosaic_mixup(&groups, &last, cfg, (size, size), rng)?;
    Ok(filter_valid_labels(&out, cfg))
}

fn hash_hex(bytes: &[u8]) -> String {
    format!("{:016x}", fnv1a(bytes))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let mut m = LossBreakdown::default();
    for b in items {
        m.total += b.total / n;
        m.cls += b.cls / n;
        m.iou += b.iou / n;
        m.obj += b.obj / n;
        m.reg += b.reg / n;
        m.positives += b.positives;
    }
    m
}

/// Generates the synthetic splits and trains on them.
pub fn train_toy(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_set = gen_shapes(&cfg.train_shapes());
    let val_set = gen_shapes(&cfg.val_shapes());
    train(cfg, &train_set, &val_set, out_dir)
}

/// Trains a toy detector. With `out_dir`, writes `metrics.jsonl` after every
/// epoch and `model.ckpt` (+ `.arch`) plus `fused.ckpt` at the end.
pub fn train(
    cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.len() < cfg.batch_size {
        return Err(Error::invalid("train_set", "fewer images than one batch"));
    }
    let schedule = cfg.schedule();
    let mut model = ToyModel::new(cfg.model_config(train_set.num_classes()), cfg.seed)?;
    let mut optim = OptimState::new(1.0, cfg.momentum as f32, cfg.weight_decay as f32)?;
    let size = cfg.image_size;
    let steps = (train_set.len() / cfg.batch_size).min(cfg.max_steps_per_epoch.unwrap_or(usize::MAX)).max(1);
    let aug_seed = derive_seed(cfg.seed, "augment");
    let loss_seed = derive_seed(cfg.seed, "loss-draws");
    let shuffle_seed = derive_seed(cfg.seed, "shuffle");
    let mut history: Vec<EpochMetrics> = Vec::with_capacity(cfg.total_epochs);
    let mut jsonl = String::new();
    let mut global_step = 0u64;

    for epoch in 0..cfg.total_epochs {
        let started = Instant::now();
        let stage = stage_config(epoch, &schedule)?;
        let augment = stage.augmentation_enabled.then_some(&cfg.augment);
        let stage_transition = match history.last() {
            None => Some(describe_start(&stage)),
            Some(h) if h.stage.stage != stage.stage => Some(describe_transition(&h.stage, &stage)),
            Some(_) => None,
        };
        if let Some(t) = &stage_transition {
            log::info!("epoch {epoch}: {t}");
        }
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut keyed(shuffle_seed, epoch as u64));
        let slot_key = |slot: usize| ((epoch as u64) << 32) | slot as u64;
        // Probe: the first training image under this epoch's transform.
        let probe = build_sample(train_set, 0, augment, size, &mut keyed(aug_seed, slot_key(u32::MAX as usize)))?;
        let input_hash = hash_hex(probe.image.as_raw());

        let mut losses = Vec::with_capacity(steps);
        let (mut lr_first, mut lr_last) = (0.0, 0.0);
        for step in 0..steps {
            let batch: Vec<Sample> = (0..cfg.batch_size)
                .into_par_iter()
                .map(|j| {
                    let slot = step * cfg.batch_size + j;
                    build_sample(train_set, order[slot], augment, size, &mut keyed(aug_seed, slot_key(slot)))
                })
                .collect::<Result<_>>()?;
            let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
            let x = images_to_tensor(&images)?;
            let labels: Vec<_> = batch.iter().map(|s| s.labels.clone()).collect();

            let lr = lr_at(step, epoch, steps, &schedule);
            if step == 0 {
                lr_first = lr;
            }
            lr_last = lr;
            model.zero_grad();
            let raw = model.forward(&x, Mode::Train)?;
            let (b, grad) = detection_loss(
                &raw,
                &labels,
                (size as usize, size as usize),
                &stage,
                &mut keyed(loss_seed, global_step),
            )?;
            if !b.is_finite() {
                let ids: Vec<&str> = batch.iter().map(|s| s.source_id.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    snapshot: format!("{} lr={lr} sources={ids:?}", serde_json::to_string(&b).unwrap_or_default()),
                });
            }
            model.backward(&grad)?;
            optim.lr = lr as f32;
            sgd_step(&mut model, &mut optim)?;
            losses.push(b);
            global_step += 1;
        }

        let last_epoch = epoch + 1 == cfg.total_epochs;
        let due = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        let eval = if due && !last_epoch {
            let r = evaluate(&model.to_spec().fuse()?, val_set, cfg.eval_conf_thr, cfg.nms_thr, (size, size))?;
            Some(EvalSummary { ap50: r.ap50, ap50_95: r.ap50_95 })
        } else {
            None
        };
        let metrics = EpochMetrics {
            epoch,
            stage,
            stage_transition,
            steps,
            lr_first,
            lr_last,
            loss: mean_breakdown(&losses),
            input_hash,
            eval,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch} stage {} loss {:.4} (cls {:.4} iou {:.4} obj {:.4} reg {:.4}) {:.1}s",
            stage.stage,
            metrics.loss.total,
            metrics.loss.cls,
            metrics.loss.iou,
            metrics.loss.obj,
            metrics.loss.reg,
            metrics.seconds
        );
        history.push(metrics);
        if let Some(dir) = out_dir {
            jsonl.push_str(
                &serde_json::to_string(history.last().expect("just pushed"))
                    .map_err(|e| Error::Config(e.to_string()))?,
            );
            jsonl.push('\n');
            write_atomic(&dir.join("metrics.jsonl"), jsonl.as_bytes())?;
        }
    }

    let fused = model.to_spec().fuse()?;
    let final_eval = evaluate(&fused, val_set, cfg.eval_conf_thr, cfg.nms_thr, (size, size))?;
    if let Some(last) = history.last_mut() {
        last.eval = Some(EvalSummary { ap50: final_eval.ap50, ap50_95: final_eval.ap50_95 });
    }
    if let Some(dir) = out_dir {
        let text: String = history
            .iter()
            .map(|h| serde_json::to_string(h).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join("metrics.jsonl"), text.as_bytes())?;
        model.save(&dir.join("model.ckpt"))?;
        fused.save(&dir.join("fused.ckpt"))?;
        write_atomic(&dir.join("train.toml"), cfg.to_toml().as_bytes())?;
    }
    Ok(TrainOutcome { model, history, final_eval })
}

/// Ground truth of a dataset keyed by sample position.
pub fn ground_truth(dataset: &Dataset) -> Vec<ImageGroundTruth> {
    dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| ImageGroundTruth { image_id: i as u64, labels: s.labels.clone() })
        .collect()
}

/// Runs `spec` on every image (letterboxed to `input_size`), maps boxes back
/// to image coordinates and scores them with COCO-style AP.
pub fn predict(
    spec: &DetectorSpec,
    dataset: &Dataset,
    conf_thr: f32,
    nms_thr: f32,
    input_size: (u32, u32),
) -> Result<Vec<ImageDetections>> {
    let chunks: Vec<Vec<ImageDetections>> = dataset
        .samples
        .par_chunks(EVAL_BATCH)
        .enumerate()
        .map(|(k, chunk)| {
            let boxed: Vec<_> = chunk.iter().map(|s| letterbox_image(&s.image, input_size)).collect();
            let images: Vec<_> = boxed.iter().map(|(img, _)| img).collect();
            let raw = spec.infer(&images_to_tensor(&images)?)?;
            Ok(postprocess(&raw, conf_thr, nms_thr)
                .into_iter()
                .zip(&boxed)
                .enumerate()
                .map(|(j, (mut dets, (_, t)))| {
                    for d in &mut dets {
                        d.bbox = t.invert_box(&d.bbox);
                    }
                    ImageDetections { image_id: (k * EVAL_BATCH + j) as u64, detections: dets }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// AP of `spec` on `dataset`. The model is used as given; pass a fused spec
/// for deployment numbers.
pub fn evaluate(
    spec: &DetectorSpec,
    dataset: &Dataset,
    conf_thr: f32,
    nms_thr: f32,
    input_size: (u32, u32),
) -> Result<EvalResult> {
    evaluate_with_detections(spec, dataset, conf_thr, nms_thr, input_size).map(|(r, _)| r)
}

/// [`evaluate`] that also returns the detections it scored.
pub fn evaluate_with_detections(
    spec: &DetectorSpec,
    dataset: &Dataset,
    conf_thr: f32,
    nms_thr: f32,
    input_size: (u32, u32),
) -> Result<(EvalResult, Vec<ImageDetections>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("dataset", "cannot evaluate on an empty dataset"));
    }
    if dataset.num_classes() != spec.config.num_classes {
        return Err(Error::invalid(
            "dataset",
            format!("{} classes, model predicts {}", dataset.num_classes(), spec.config.num_classes),
        ));
    }
    let dets = predict(spec, dataset, conf_thr, nms_thr, input_size)?;
    Ok((compute_ap(&dets, &ground_truth(dataset), &COCO_IOU_THRESHOLDS)?, dets))
}

/// Loads a checkpoint (fused or not), fuses it if needed and evaluates.
pub fn evaluate_checkpoint(
    path: &Path,
    dataset: &Dataset,
    conf_thr: f32,
    nms_thr: f32,
    input_size: (u32, u32),
) -> Result<EvalResult> {
    let spec = DetectorSpec::load(path)?;
    let spec = if spec.is_fused() { spec } else { spec.fuse()? };
    evaluate(&spec, dataset, conf_thr, nms_thr, input_size)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke() -> TrainConfig {
        TrainConfig {
            train_images: 32,
            val_images: 8,
            image_size: 64,
            max_side: 24,
            width_mult: 0.25,
            total_epochs: 4,
            warmup_epochs: 1,
            stage2_start_epoch: 2,
            stage3_start_epoch: 3,
            batch_size: 8,
            max_steps_per_epoch: Some(2),
            eval_every: 2,
            ..Default::default()
        }
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = TrainConfig::default();
        let text = cfg.to_toml();
        assert!(text.contains("lr_per_img = 0.00015625"));
        assert!(text.contains("mosaic_groups = 2"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
        let partial =
            TrainConfig::from_toml("total_epochs = 40\nstage2_start_epoch = 30\nstage3_start_epoch = 35").unwrap();
        assert_eq!(partial.batch_size, 16);
        assert!(TrainConfig::from_toml("stage2_start_epoch = 40").is_err());
    }

    #[test]
    fn smoke_run_logs_stages_and_is_deterministic() {
        let cfg = smoke();
        let a = train_toy(&cfg, None).unwrap();
        let b = train_toy(&cfg, None).unwrap();
        let losses = |o: &TrainOutcome| o.history.iter().map(|h| h.loss.total.to_bits()).collect::<Vec<_>>();
        assert_eq!(losses(&a), losses(&b));
        let transitions: Vec<_> = a.history.iter().filter_map(|h| h.stage_transition.clone()).collect();
        assert_eq!(transitions.len(), 3);
        assert_eq!(transitions[0], "stage 1 start, cls/obj bce, iou giou, regulation none, augmentation on");
        assert!(transitions[1].contains("cls/obj bce -> hrl"));
        assert!(transitions[2].contains("iou giou -> ciou") && transitions[2].contains("regulation none -> l1"));
        assert!(transitions[2].contains("augmentation on -> off"));
        let hashes: Vec<_> = a.history.iter().map(|h| h.input_hash.clone()).collect();
        assert_ne!(hashes[0], hashes[1]);
        assert!(a.history.iter().all(|h| h.loss.is_finite()));
        assert!(a.history[1].eval.is_some() && a.history[3].eval.is_some());
    }

    #[test]
    fn evaluate_rejects_bad_datasets() {
        let spec = crate::head::build_toy_model(3, 0.25, 0).unwrap().to_spec();
        let empty = Dataset { samples: vec![], class_names: vec!["a".into(), "b".into(), "c".into()] };
        assert!(evaluate(&spec, &empty, 0.01, 0.65, (64, 64)).is_err());
        let mut two = gen_shapes(&ShapesConfig { n_images: 2, image_size: 64, max_side: 24, ..Default::default() });
        two.class_names.pop();
        assert!(evaluate(&spec, &two, 0.01, 0.65, (64, 64)).is_err());
    }
}
