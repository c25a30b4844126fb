//! Training-time augmentation: affine warps with outline-aware label
//! updates, mosaic groups blended with a contained final image, HSV jitter
//! and validity filtering.

mod affine;
mod hsv;
mod mosaic;

pub use affine::{
    affine_augment, rotated_box_from_corners, rotated_box_from_polygon, warp_image, Affine, AffineParams,
};
pub use hsv::{hsv_apply, hsv_augment, hsv_to_rgb, rgb_to_hsv, HsvGains};
pub use mosaic::{enhanced_mosaic_mixup, enhanced_mosaic_mixup_report, mosaic, mosaic_at, MixupReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub mosaic_groups: usize,
    /// Rotation drawn from `±rotation_deg`.
    pub rotation_deg: f32,
    pub scale_range: [f32; 2],
    pub shear_deg: f32,
    /// Translation drawn from `±translate_frac` of the canvas, per axis.
    pub translate_frac: f32,
    pub flip_prob: f32,
    pub hsv: HsvGains,
    pub mixup_alpha: f32,
    pub min_box_area_px: f32,
    pub min_visibility_frac: f32,
    /// Lower bound of the shrink applied to the final mixed-in image.
    pub last_scale_min: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mosaic_groups: 2,
            rotation_deg: 10.0,
            scale_range: [0.5, 1.5],
            shear_deg: 2.0,
            translate_frac: 0.1,
            flip_prob: 0.5,
            hsv: HsvGains::default(),
            mixup_alpha: 8.0,
            min_box_area_px: 4.0,
            min_visibility_frac: 0.25,
            last_scale_min: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.rotation_deg, self.shear_deg, self.translate_frac, self.hsv.h, self.hsv.s, self.hsv.v]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if self.mosaic_groups == 0 {
            return Err(Error::invalid("mosaic_groups", "must be positive"));
        }
        if !finite {
            return Err(Error::invalid("augment", "ranges and gains must be finite and non-negative"));
        }
        if !(self.scale_range[0] > 0.0 && self.scale_range[0] <= self.scale_range[1]) {
            return Err(Error::invalid("scale_range", format!("{:?} must satisfy 0 < lo <= hi", self.scale_range)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid("flip_prob", "must lie in [0, 1]"));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::invalid("mixup_alpha", "must be positive"));
        }
        if !(self.min_visibility_frac > 0.0 && self.min_visibility_frac <= 1.0) {
            return Err(Error::invalid("min_visibility_frac", "must lie in (0, 1]"));
        }
        if !(self.last_scale_min > 0.0 && self.last_scale_min <= 1.0) {
            return Err(Error::invalid("last_scale_min", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn sample_affine(&self, rng: &mut impl Rng) -> AffineParams {
        let sym = |rng: &mut dyn rand::RngCore, r: f32| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
        let [lo, hi] = self.scale_range;
        AffineParams {
            rotation_deg: sym(rng, self.rotation_deg),
            scale: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            shear_deg: sym(rng, self.shear_deg),
            translate_frac: [sym(rng, self.translate_frac), sym(rng, self.translate_frac)],
            flip_lr: rng.random_bool(self.flip_prob as f64),
        }
    }
}

/// Why labels were removed.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FilterStats {
    pub too_small: usize,
    pub mostly_hidden: usize,
}

/// Drops labels whose on-canvas area is under `min_box_area_px` or whose
/// visible fraction is under `min_visibility_frac`.
pub fn filter_valid_labels(sample: &Sample, cfg: &AugmentConfig) -> Sample {
    filter_valid_labels_counted(sample, cfg).0
}

pub fn filter_valid_labels_counted(sample: &Sample, cfg: &AugmentConfig) -> (Sample, FilterStats) {
    let (w, h) = (sample.width() as f32, sample.height() as f32);
    let mut stats = FilterStats::default();
    let labels = sample
        .labels
        .iter()
        .filter(|l| {
            let area = l.bbox.area();
            let on_canvas = l.bbox.clip(w, h).area();
            let visible = if area > 0.0 { l.visible * on_canvas / area } else { 0.0 };
            if on_canvas < cfg.min_box_area_px || !l.bbox.is_valid() {
                stats.too_small += 1;
                false
            } else if visible < cfg.min_visibility_frac {
                stats.mostly_hidden += 1;
                false
            } else {
                true
            }
        })
        .cloned()
        .collect();
    (Sample { image: sample.image.clone(), labels, source_id: sample.source_id.clone() }, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BoxLabel;
    use crate::geometry::BBox;
    use image::RgbImage;

    #[test]
    fn filter_rules() {
        let cfg = AugmentConfig { min_box_area_px: 10.0, min_visibility_frac: 0.2, ..Default::default() };
        let s = Sample::new(
            RgbImage::new(100, 100),
            vec![
                BoxLabel::new(0, BBox::new(10.0, 10.0, 20.0, 20.0)),
                BoxLabel::new(0, BBox::new(91.0, 0.0, 191.0, 100.0)),
                BoxLabel::new(0, BBox::new(0.0, 0.0, 3.0, 3.0)),
            ],
            "x",
        );
        let (out, stats) = filter_valid_labels_counted(&s, &cfg);
        assert_eq!(out.labels, vec![s.labels[0].clone()]);
        assert_eq!(stats, FilterStats { too_small: 1, mostly_hidden: 1 });
        let empty = Sample::new(RgbImage::new(4, 4), vec![], "e");
        assert!(filter_valid_labels(&empty, &cfg).labels.is_empty());
    }

    #[test]
    fn default_config_is_valid() {
        AugmentConfig::default().validate().unwrap();
        let bad = AugmentConfig { mosaic_groups: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
