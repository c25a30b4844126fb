//! Three-stage loss/augmentation schedule and the learning-rate curve.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of `L = α·L_cls + λ·L_iou + μ·L_obj + ζ·L_reg`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub lambda: f64,
    pub mu: f64,
    pub zeta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, lambda: 5.0, mu: 1.0, zeta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.lambda, self.mu, self.zeta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("weights", format!("{all:?} must be finite and non-negative")));
        }
        Ok(())
    }
}

/// Weighted sum of the four loss components.
pub fn total_loss(cls: f64, iou: f64, obj: f64, reg: f64, w: &LossWeights) -> f64 {
    w.alpha * cls + w.lambda * iou + w.mu * obj + w.zeta * reg
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsObjLoss {
    Bce,
    Focal,
    Hrl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouLoss {
    Giou,
    Ciou,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regulation {
    None,
    L1,
}

/// Loss and augmentation selection active during one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub cls_obj_loss: ClsObjLoss,
    pub iou_loss: IouLoss,
    pub regulation: Regulation,
    pub augmentation_enabled: bool,
    pub weights: LossWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub total_epochs: usize,
    pub stage2_start_epoch: usize,
    pub stage3_start_epoch: usize,
    pub warmup_epochs: usize,
    pub lr_per_image: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
}

impl Default for TrainSchedule {
    /// Full-scale defaults: 300 epochs, stage 2 for the last 30, stage 3 for the last 15.
    fn default() -> Self {
        Self::with_total(300)
    }
}

impl TrainSchedule {
    pub const LR_PER_IMAGE: f64 = 1.0 / 6400.0;
    /// Floor of the post-warmup cosine decay, as a fraction of the peak.
    pub const MIN_LR_RATIO: f64 = 0.05;

    pub fn with_total(total_epochs: usize) -> Self {
        Self {
            total_epochs,
            stage2_start_epoch: total_epochs.saturating_sub(30),
            stage3_start_epoch: total_epochs.saturating_sub(15),
            warmup_epochs: 5,
            lr_per_image: Self::LR_PER_IMAGE,
            batch_size: 32,
            momentum: 0.9,
            weight_decay: 0.0005,
            weights: LossWeights::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = 0 < self.warmup_epochs
            && self.warmup_epochs <= self.stage2_start_epoch
            && self.stage2_start_epoch < self.stage3_start_epoch
            && self.stage3_start_epoch <= self.total_epochs;
        if !ok {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "need 0 < warmup ({}) <= stage2 ({}) < stage3 ({}) <= total ({})",
                    self.warmup_epochs, self.stage2_start_epoch, self.stage3_start_epoch, self.total_epochs
                ),
            ));
        }
        if !(self.lr_per_image > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid("schedule", "lr_per_image and batch_size must be positive"));
        }
        self.weights.validate()
    }

    pub fn max_lr(&self) -> f64 {
        self.lr_per_image * self.batch_size as f64
    }
}

/// Stage 1: BCE + gIoU with augmentation; stage 2: hybrid-random loss + gIoU
/// with augmentation; stage 3: hybrid-random loss + cIoU + L1, augmentation off.
pub fn stage_config(epoch: usize, schedule: &TrainSchedule) -> Result<StageConfig> {
    if epoch >= schedule.total_epochs {
        return Err(Error::invalid("epoch", format!("{epoch} >= total {}", schedule.total_epochs)));
    }
    let no_reg = LossWeights { zeta: 0.0, ..schedule.weights };
    Ok(if epoch < schedule.stage2_start_epoch {
        StageConfig {
            stage: 1,
            cls_obj_loss: ClsObjLoss::Bce,
            iou_loss: IouLoss::Giou,
            regulation: Regulation::None,
            augmentation_enabled: true,
            weights: no_reg,
        }
    } else if epoch < schedule.stage3_start_epoch {
        StageConfig {
            stage: 2,
            cls_obj_loss: ClsObjLoss::Hrl,
            iou_loss: IouLoss::Giou,
            regulation: Regulation::None,
            augmentation_enabled: true,
            weights: no_reg,
        }
    } else {
        StageConfig {
            stage: 3,
            cls_obj_loss: ClsObjLoss::Hrl,
            iou_loss: IouLoss::Ciou,
            regulation: Regulation::L1,
            augmentation_enabled: false,
            weights: schedule.weights,
        }
    })
}

/// Learning rate at a fractional epoch position: linear warm-up from 0 to
/// `lr_per_image × batch_size`, then cosine decay to 5% of the peak.
pub fn lr_at_progress(progress_epochs: f64, schedule: &TrainSchedule) -> f64 {
    let max_lr = schedule.max_lr();
    let warm = schedule.warmup_epochs as f64;
    let e = progress_epochs.max(0.0);
    if e < warm {
        return max_lr * e / warm;
    }
    let span = (schedule.total_epochs as f64 - warm).max(f64::EPSILON);
    let t = ((e - warm) / span).min(1.0);
    let min_lr = TrainSchedule::MIN_LR_RATIO * max_lr;
    min_lr + (max_lr - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Learning rate at optimizer step `step` (within `epoch`) when an epoch has
/// `steps_per_epoch` steps.
pub fn lr_at(step: usize, epoch: usize, steps_per_epoch: usize, schedule: &TrainSchedule) -> f64 {
    let frac = step as f64 / steps_per_epoch.max(1) as f64;
    lr_at_progress(epoch as f64 + frac, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> TrainSchedule {
        TrainSchedule { stage2_start_epoch: 20, stage3_start_epoch: 24, ..TrainSchedule::with_total(30) }
    }

    #[test]
    fn weighted_sum() {
        let ones = LossWeights { alpha: 1.0, lambda: 1.0, mu: 1.0, zeta: 1.0 };
        assert_eq!(total_loss(1.0, 2.0, 3.0, 4.0, &ones), 10.0);
        let v = total_loss(0.5, 0.2, 0.3, 0.0, &LossWeights::default());
        assert!((v - 1.8).abs() < 1e-12);
        let no_reg = LossWeights { zeta: 0.0, ..LossWeights::default() };
        assert_eq!(total_loss(0.0, 0.0, 0.0, 123.0, &no_reg), 0.0);
    }

    #[test]
    fn stages() {
        let s = toy();
        let c0 = stage_config(0, &s).unwrap();
        assert_eq!(
            (c0.cls_obj_loss, c0.iou_loss, c0.regulation, c0.augmentation_enabled),
            (ClsObjLoss::Bce, IouLoss::Giou, Regulation::None, true)
        );
        assert_eq!(c0.weights.zeta, 0.0);
        let c2 = stage_config(20, &s).unwrap();
        assert_eq!((c2.cls_obj_loss, c2.iou_loss, c2.augmentation_enabled), (ClsObjLoss::Hrl, IouLoss::Giou, true));
        let c3 = stage_config(24, &s).unwrap();
        assert_eq!(
            (c3.cls_obj_loss, c3.iou_loss, c3.regulation, c3.augmentation_enabled),
            (ClsObjLoss::Hrl, IouLoss::Ciou, Regulation::L1, false)
        );
        assert_eq!(c3.weights.zeta, 1.0);
        assert!(stage_config(30, &s).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(toy().validate().is_ok());
        assert!(TrainSchedule { warmup_epochs: 0, ..toy() }.validate().is_err());
        assert!(TrainSchedule { stage3_start_epoch: 20, ..toy() }.validate().is_err());
        assert!(TrainSchedule::default().validate().is_ok());
    }

    #[test]
    fn learning_rate_curve() {
        let s = TrainSchedule::with_total(300);
        assert!((s.max_lr() - 0.005).abs() < 1e-15);
        assert_eq!(lr_at(0, 0, 100, &s), 0.0);
        assert!((lr_at_progress(2.5, &s) - 0.0025).abs() < 1e-15);
        assert!((lr_at(50, 2, 100, &s) - 0.0025).abs() < 1e-15);
        assert!((lr_at_progress(5.0, &s) - 0.005).abs() < 1e-15);
        assert!((lr_at_progress(300.0, &s) - 0.05 * 0.005).abs() < 1e-15);
    }
}
