use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use super::affine::{affine_augment, apply_affine, round_u8, Affine};
use super::hsv::hsv_augment;
use super::{filter_valid_labels_counted, AugmentConfig, FilterStats};
use crate::data::{letterbox, BoxLabel, Sample, PAD_GRAY};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// 2×2 mosaic with the tiles meeting at `split`. Each source is scaled to
/// fit half the canvas and cropped where it crosses the canvas border.
pub fn mosaic_at(samples: &[Sample], out: (u32, u32), split: (f32, f32)) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(Error::invalid("mosaic", format!("needs exactly 4 samples, got {}", samples.len())));
    }
    let (w, h) = (out.0 as i64, out.1 as i64);
    let (xc, yc) = (split.0.round() as i64, split.1.round() as i64);
    let mut canvas = RgbImage::from_pixel(out.0, out.1, Rgb([PAD_GRAY; 3]));
    let mut labels = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let scale = (out.0 as f32 / 2.0 / s.width() as f32).min(out.1 as f32 / 2.0 / s.height() as f32);
        let tw = ((s.width() as f32 * scale).round() as i64).max(1);
        let th = ((s.height() as f32 * scale).round() as i64).max(1);
        let (ox, oy) = match i {
            0 => (xc - tw, yc - th),
            1 => (xc, yc - th),
            2 => (xc - tw, yc),
            _ => (xc, yc),
        };
        let resized;
        let tile = if (tw, th) == (s.width() as i64, s.height() as i64) {
            &s.image
        } else {
            resized = imageops::resize(&s.image, tw as u32, th as u32, imageops::FilterType::Triangle);
            &resized
        };
        imageops::replace(&mut canvas, tile, ox, oy);
        let visible = BBox::new(ox.max(0) as f32, oy.max(0) as f32, (ox + tw).min(w) as f32, (oy + th).min(h) as f32);
        let (sx, sy) = (tw as f32 / s.width() as f32, th as f32 / s.height() as f32);
        let m = Affine([[sx as f64, 0.0, ox as f64], [0.0, sy as f64, oy as f64]]);
        for l in &s.labels {
            let moved = BBox::new(
                l.bbox.x1 * sx + ox as f32,
                l.bbox.y1 * sy + oy as f32,
                l.bbox.x2 * sx + ox as f32,
                l.bbox.y2 * sy + oy as f32,
            );
            let clipped = BBox::new(
                moved.x1.max(visible.x1),
                moved.y1.max(visible.y1),
                moved.x2.min(visible.x2),
                moved.y2.min(visible.y2),
            );
            if !clipped.is_valid() || moved.area() <= 0.0 {
                continue;
            }
            labels.push(BoxLabel {
                class_id: l.class_id,
                bbox: clipped,
                polygon: l.polygon.as_ref().map(|p| p.iter().map(|&v| m.apply_f32(v)).collect()),
                visible: l.visible * clipped.area() / moved.area(),
            });
        }
    }
    let source_id = samples.iter().map(|s| s.source_id.as_str()).collect::<Vec<_>>().join("+");
    Ok(Sample { image: canvas, labels, source_id })
}

/// [`mosaic_at`] with the split drawn uniformly from the central half.
pub fn mosaic(samples: &[Sample], out: (u32, u32), rng: &mut impl Rng) -> Result<Sample> {
    let (w, h) = (out.0 as f32, out.1 as f32);
    let split = (rng.random_range(w * 0.25..=w * 0.75), rng.random_range(h * 0.25..=h * 0.75));
    mosaic_at(samples, out, split)
}

/// Label bookkeeping from one [`enhanced_mosaic_mixup`] call.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct MixupReport {
    pub labels_in: usize,
    pub labels_out: usize,
    pub lost_in_geometry: usize,
    pub filter: FilterStats,
    pub weights: Vec<f32>,
}

/// Mosaic groups, each geometrically augmented, blended with one simply
/// processed image whose extent stays inside the output canvas.
pub fn enhanced_mosaic_mixup(
    groups: &[Vec<Sample>],
    last: &Sample,
    cfg: &AugmentConfig,
    out: (u32, u32),
    rng: &mut impl Rng,
) -> Result<Sample> {
    enhanced_mosaic_mixup_report(groups, last, cfg, out, rng).map(|(s, _)| s)
}

pub fn enhanced_mosaic_mixup_report(
    groups: &[Vec<Sample>],
    last: &Sample,
    cfg: &AugmentConfig,
    out: (u32, u32),
    rng: &mut impl Rng,
) -> Result<(Sample, MixupReport)> {
    if groups.is_empty() {
        return Err(Error::invalid("groups", "at least one mosaic group is required"));
    }
    if groups.len() != cfg.mosaic_groups {
        return Err(Error::invalid(
            "groups",
            format!("{} groups supplied, config asks for {}", groups.len(), cfg.mosaic_groups),
        ));
    }
    cfg.validate()?;
    let mut report = MixupReport {
        labels_in: groups.iter().flatten().chain(std::iter::once(last)).map(|s| s.labels.len()).sum(),
        ..Default::default()
    };
    let mut parts = Vec::with_capacity(groups.len() + 1);
    let mut ids = Vec::new();
    for g in groups {
        let m = mosaic(g, (out.0 * 2, out.1 * 2), rng)?;
        let a = affine_augment(&m, &cfg.sample_affine(rng), out)?;
        ids.extend(g.iter().map(|s| s.source_id.clone()));
        parts.push(hsv_augment(&a, &cfg.hsv, rng));
    }
    let simple = simple_process(last, cfg, out, rng)?;
    ids.push(last.source_id.clone());
    parts.push(hsv_augment(&simple, &cfg.hsv, rng));
    report.lost_in_geometry = report.labels_in - parts.iter().map(|p| p.labels.len()).sum::<usize>();

    let beta = Beta::new(cfg.mixup_alpha as f64, cfg.mixup_alpha as f64)
        .map_err(|e| Error::invalid("mixup_alpha", e.to_string()))?;
    let raw: Vec<f64> = parts.iter().map(|_| beta.sample(rng).max(1e-6)).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f32> = raw.iter().map(|w| (w / total) as f32).collect();
    let mut image = RgbImage::new(out.0, out.1);
    let bufs: Vec<&[u8]> = parts.iter().map(|p| p.image.as_raw().as_slice()).collect();
    for (i, dst) in image.iter_mut().enumerate() {
        let v: f32 = bufs.iter().zip(&weights).map(|(b, w)| b[i] as f32 * w).sum();
        *dst = round_u8(v);
    }
    let labels = parts.into_iter().flat_map(|p| p.labels).collect();
    let mixed = Sample { image, labels, source_id: ids.join("+") };
    let (filtered, stats) = filter_valid_labels_counted(&mixed, cfg);
    report.filter = stats;
    report.labels_out = filtered.labels.len();
    report.weights = weights;
    Ok((filtered, report))
}

/// Letterbox, optional flip and a bounded shrink-and-shift that keeps the
/// whole image inside the canvas. The shrink never takes a label below the
/// minimum box area.
fn simple_process(last: &Sample, cfg: &AugmentConfig, out: (u32, u32), rng: &mut impl Rng) -> Result<Sample> {
    let (lb, _) = letterbox(last, out);
    let (w, h) = (out.0 as f64, out.1 as f64);
    let smallest = lb.labels.iter().map(|l| l.bbox.area()).filter(|&a| a > 0.0).fold(f32::INFINITY, f32::min);
    let floor = if smallest.is_finite() { (cfg.min_box_area_px / smallest).sqrt() * 1.001 } else { 0.0 };
    let lo = (cfg.last_scale_min.max(floor) as f64).min(1.0);
    let s = if lo < 1.0 { rng.random_range(lo..=1.0) } else { 1.0 };
    let flip = rng.random_bool(cfg.flip_prob as f64);
    let tx = if s < 1.0 { rng.random_range(0.0..=w * (1.0 - s)) } else { 0.0 };
    let ty = if s < 1.0 { rng.random_range(0.0..=h * (1.0 - s)) } else { 0.0 };
    let mirror = if flip { Affine([[-1.0, 0.0, w], [0.0, 1.0, 0.0]]) } else { Affine::IDENTITY };
    let m = Affine::translate(tx, ty).then_after(&Affine::scale(s, s)).then_after(&mirror);
    apply_affine(&lb, &m, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::keyed;

    fn solid(color: [u8; 3], w: u32, h: u32, labels: Vec<BoxLabel>, id: &str) -> Sample {
        Sample::new(RgbImage::from_pixel(w, h, Rgb(color)), labels, id)
    }

    #[test]
    fn wrong_count_is_error() {
        let s = solid([0; 3], 8, 8, vec![], "a");
        assert!(mosaic_at(&[s.clone(), s.clone(), s], (16, 16), (8.0, 8.0)).is_err());
    }

    #[test]
    fn quadrants_trace_to_sources() {
        let colors = [[255, 0, 0], [0, 255, 0], [0, 0, 255], [255, 255, 0]];
        let samples: Vec<Sample> =
            colors.iter().enumerate().map(|(i, &c)| solid(c, 32, 32, vec![], &i.to_string())).collect();
        let m = mosaic_at(&samples, (64, 64), (32.0, 32.0)).unwrap();
        assert_eq!(m.image.dimensions(), (64, 64));
        assert_eq!(m.image.get_pixel(0, 0).0, colors[0]);
        assert_eq!(m.image.get_pixel(63, 0).0, colors[1]);
        assert_eq!(m.image.get_pixel(0, 63).0, colors[2]);
        assert_eq!(m.image.get_pixel(63, 63).0, colors[3]);
        assert!(m.labels.is_empty());
        assert_eq!(m.source_id, "0+1+2+3");
    }

    #[test]
    fn interior_labels_survive() {
        let lab = |x: f32| vec![BoxLabel::new(1, BBox::new(x, x, x + 6.0, x + 6.0))];
        let samples: Vec<Sample> = (0..4).map(|i| solid([9; 3], 32, 32, lab(12.0), &i.to_string())).collect();
        let m = mosaic_at(&samples, (64, 64), (32.0, 32.0)).unwrap();
        assert_eq!(m.labels.len(), 4);
        assert_eq!(m.labels[3].bbox, BBox::new(44.0, 44.0, 50.0, 50.0));
        assert!(m.labels.iter().all(|l| l.visible == 1.0));
    }

    #[test]
    fn consumes_nine_and_keeps_last_label() {
        let cfg = AugmentConfig::default();
        let empty = |i: usize| solid([40, 80, 120], 64, 64, vec![], &format!("g{i}"));
        let groups: Vec<Vec<Sample>> = (0..2).map(|g| (0..4).map(|i| empty(g * 4 + i)).collect()).collect();
        let last = solid([200, 10, 10], 64, 64, vec![BoxLabel::new(2, BBox::new(24.0, 24.0, 40.0, 40.0))], "last");
        for seed in 0..20 {
            let out = enhanced_mosaic_mixup(&groups, &last, &cfg, (64, 64), &mut keyed(seed, 0)).unwrap();
            assert_eq!(out.source_id.split('+').count(), 9);
            assert!(!out.labels.is_empty());
            assert!(out.labels.iter().all(|l| l.bbox.is_valid() && l.bbox.x2 <= 64.0 && l.bbox.y2 <= 64.0));
        }
        let a = enhanced_mosaic_mixup(&groups, &last, &cfg, (64, 64), &mut keyed(5, 5)).unwrap();
        let b = enhanced_mosaic_mixup(&groups, &last, &cfg, (64, 64), &mut keyed(5, 5)).unwrap();
        assert_eq!(a, b);
        assert!(enhanced_mosaic_mixup(&[], &last, &cfg, (64, 64), &mut keyed(0, 0)).is_err());
    }
}
