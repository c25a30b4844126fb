use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;

/// Maximum relative change per HSV channel; factors are drawn from
/// `1 ± gain`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvGains {
    pub h: f32,
    pub s: f32,
    pub v: f32,
}

impl Default for HsvGains {
    fn default() -> Self {
        Self { h: 0.015, s: 0.7, v: 0.4 }
    }
}

impl HsvGains {
    pub const ZERO: HsvGains = HsvGains { h: 0.0, s: 0.0, v: 0.0 };
}

pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> [f32; 3] {
    let (r, g, b) = (r as f32 / 255.0, g as f32 / 255.0, b as f32 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [u8; 3] {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f32| ((u + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

/// Multiplies hue, saturation and value by fixed factors. Factors of
/// exactly 1 return the image untouched.
pub fn hsv_apply(sample: &Sample, factors: [f32; 3]) -> Sample {
    let mut out = sample.clone();
    if factors == [1.0; 3] {
        return out;
    }
    // Images tend to reuse few colours, so a small direct-mapped cache of
    // the per-colour mapping skips most of the conversions.
    let mut cache = vec![(u32::MAX, [0u8; 3]); 4096];
    for px in out.image.chunks_exact_mut(3) {
        let key = u32::from_le_bytes([px[0], px[1], px[2], 0]);
        let slot = &mut cache[(key.wrapping_mul(0x9E37_79B1) >> 20) as usize];
        if slot.0 != key {
            let [h, s, v] = rgb_to_hsv([px[0], px[1], px[2]]);
            *slot = (key, hsv_to_rgb([h * factors[0], (s * factors[1]).min(1.0), (v * factors[2]).min(1.0)]));
        }
        px.copy_from_slice(&slot.1);
    }
    out
}

pub fn hsv_augment(sample: &Sample, gains: &HsvGains, rng: &mut impl Rng) -> Sample {
    let mut draw = |g: f32| if g == 0.0 { 1.0 } else { 1.0 + rng.random_range(-1.0f32..=1.0) * g };
    let factors = [draw(gains.h), draw(gains.s), draw(gains.v)];
    hsv_apply(sample, factors)
}
