use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{BoxLabel, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const PAD_GRAY: u8 = 114;

/// Maps original image coordinates to letterboxed ones: `p' = p·scale + pad`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetterboxTransform {
    pub scale: f32,
    pub pad_left: u32,
    pub pad_top: u32,
}

impl LetterboxTransform {
    pub const IDENTITY: Self = Self { scale: 1.0, pad_left: 0, pad_top: 0 };

    pub fn apply_point(&self, [x, y]: [f32; 2]) -> [f32; 2] {
        [x * self.scale + self.pad_left as f32, y * self.scale + self.pad_top as f32]
    }

    pub fn apply_box(&self, b: &BBox) -> BBox {
        let [x1, y1] = self.apply_point([b.x1, b.y1]);
        let [x2, y2] = self.apply_point([b.x2, b.y2]);
        BBox::new(x1, y1, x2, y2)
    }

    pub fn invert_box(&self, b: &BBox) -> BBox {
        let inv = |v: f32, pad: u32| (v - pad as f32) / self.scale;
        BBox::new(inv(b.x1, self.pad_left), inv(b.y1, self.pad_top), inv(b.x2, self.pad_left), inv(b.y2, self.pad_top))
    }
}

/// Letterboxes a bare image; see [`letterbox`].
pub fn letterbox_image(image: &RgbImage, target: (u32, u32)) -> (RgbImage, LetterboxTransform) {
    let (tw, th) = (target.0.max(1), target.1.max(1));
    let (w, h) = (image.width().max(1), image.height().max(1));
    let scale = (tw as f32 / w as f32).min(th as f32 / h as f32);
    let nw = ((w as f32 * scale).round() as u32).clamp(1, tw);
    let nh = ((h as f32 * scale).round() as u32).clamp(1, th);
    let t = LetterboxTransform { scale, pad_left: (tw - nw) / 2, pad_top: (th - nh) / 2 };
    if (nw, nh) == (w, h) && (tw, th) == (w, h) {
        return (image.clone(), LetterboxTransform::IDENTITY);
    }
    let resized;
    let src = if (nw, nh) == (w, h) {
        image
    } else {
        resized = imageops::resize(image, nw, nh, imageops::FilterType::Triangle);
        &resized
    };
    let mut canvas = RgbImage::from_pixel(tw, th, Rgb([PAD_GRAY; 3]));
    imageops::replace(&mut canvas, src, t.pad_left as i64, t.pad_top as i64);
    (canvas, t)
}

/// Aspect-preserving resize into `target` with centred gray padding.
pub fn letterbox(sample: &Sample, target: (u32, u32)) -> (Sample, LetterboxTransform) {
    let (canvas, t) = letterbox_image(&sample.image, target);
    let (tw, th) = (canvas.width(), canvas.height());
    let labels = sample
        .labels
        .iter()
        .map(|l| BoxLabel {
            class_id: l.class_id,
            bbox: t.apply_box(&l.bbox).clip(tw as f32, th as f32),
            polygon: l.polygon.as_ref().map(|p| p.iter().map(|&v| t.apply_point(v)).collect()),
            visible: l.visible,
        })
        .collect();
    (Sample { image: canvas, labels, source_id: sample.source_id.clone() }, t)
}

/// Network input size for a frame aspect ratio: width `base`, height rounded
/// up to a multiple of 32.
pub fn adapt_input_size(aspect_ratio: (u32, u32), base: u32) -> Result<(u32, u32)> {
    let (rw, rh) = aspect_ratio;
    if rw == 0 || rh == 0 {
        return Err(Error::invalid("aspect_ratio", format!("{rw}:{rh} must be positive")));
    }
    if base == 0 || !base.is_multiple_of(32) {
        return Err(Error::invalid("base", format!("{base} is not a positive multiple of 32")));
    }
    let h = (base as f64 * rh as f64 / rw as f64).round() as u32;
    Ok((base, h.div_ceil(32).max(1) * 32))
}
