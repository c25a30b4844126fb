use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::{BoxLabel, Sample, PAD_GRAY};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// 2×3 affine map `p' = A·p + t`, stored row-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    pub fn translate(dx: f64, dy: f64) -> Self {
        Affine([[1.0, 0.0, dx], [0.0, 1.0, dy]])
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Affine([[sx, 0.0, 0.0], [0.0, sy, 0.0]])
    }

    /// Counter-clockwise on screen (y down) for positive angles.
    pub fn rotate_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Affine([[c, s, 0.0], [-s, c, 0.0]])
    }

    pub fn shear_deg(sx_deg: f64, sy_deg: f64) -> Self {
        Affine([[1.0, sx_deg.to_radians().tan(), 0.0], [sy_deg.to_radians().tan(), 1.0, 0.0]])
    }

    /// `self ∘ other`: apply `other` first.
    pub fn then_after(&self, other: &Affine) -> Affine {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 3]; 2];
        for r in 0..2 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + if c == 2 { a[r][2] } else { 0.0 };
            }
        }
        Affine(m)
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn inverse(&self) -> Result<Affine> {
        let det = self.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::invalid("affine", "matrix is not invertible"));
        }
        let [[a, b, tx], [c, d, ty]] = self.0;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(Affine([[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]]))
    }

    pub fn apply(&self, [x, y]: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2]]
    }

    pub fn apply_f32(&self, p: [f32; 2]) -> [f32; 2] {
        let [x, y] = self.apply([p[0] as f64, p[1] as f64]);
        [x as f32, y as f32]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation_deg: f32,
    pub scale: f32,
    pub shear_deg: f32,
    /// Translation as a fraction of the canvas size.
    pub translate_frac: [f32; 2],
    pub flip_lr: bool,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self { rotation_deg: 0.0, scale: 1.0, shear_deg: 0.0, translate_frac: [0.0, 0.0], flip_lr: false }
    }
}

impl AffineParams {
    /// Maps source pixel coordinates to canvas coordinates: the source
    /// centre goes to the canvas centre (plus translation), with flip,
    /// rotation, scale and shear applied about it.
    pub fn matrix(&self, src: (u32, u32), canvas: (u32, u32)) -> Result<Affine> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::invalid("scale", format!("{} must be positive", self.scale)));
        }
        let center = Affine::translate(-(src.0 as f64) / 2.0, -(src.1 as f64) / 2.0);
        let flip = if self.flip_lr { Affine::scale(-1.0, 1.0) } else { Affine::IDENTITY };
        let rs = Affine::rotate_deg(self.rotation_deg as f64)
            .then_after(&Affine::scale(self.scale as f64, self.scale as f64));
        let shear = Affine::shear_deg(self.shear_deg as f64, self.shear_deg as f64);
        let place = Affine::translate(
            canvas.0 as f64 / 2.0 + self.translate_frac[0] as f64 * canvas.0 as f64,
            canvas.1 as f64 / 2.0 + self.translate_frac[1] as f64 * canvas.1 as f64,
        );
        Ok(place.then_after(&shear).then_after(&rs).then_after(&flip).then_after(&center))
    }
}

/// Axis-aligned box through the four transformed corners of `bbox`.
pub fn rotated_box_from_corners(bbox: &BBox, m: &Affine) -> BBox {
    let corners = [[bbox.x1, bbox.y1], [bbox.x2, bbox.y1], [bbox.x2, bbox.y2], [bbox.x1, bbox.y2]];
    let pts: Vec<[f32; 2]> = corners.iter().map(|&p| m.apply_f32(p)).collect();
    BBox::bounding(&pts).expect("four corners")
}

fn polygon_area(poly: &[[f32; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % n]);
            a[0] as f64 * b[1] as f64 - b[0] as f64 * a[1] as f64
        })
        .sum::<f64>()
        .abs()
        / 2.0
}

/// Axis-aligned box through every transformed outline vertex.
pub fn rotated_box_from_polygon(polygon: &[[f32; 2]], m: &Affine) -> Result<BBox> {
    if polygon.len() < 3 || polygon_area(polygon) <= 0.0 {
        return Err(Error::Degenerate(format!("polygon with {} vertices has zero area", polygon.len())));
    }
    let pts: Vec<[f32; 2]> = polygon.iter().map(|&p| m.apply_f32(p)).collect();
    Ok(BBox::bounding(&pts).expect("non-empty polygon"))
}

/// Transforms one label; `None` when nothing of it remains on the canvas.
pub(crate) fn transform_label(label: &BoxLabel, m: &Affine, canvas: (u32, u32)) -> Option<BoxLabel> {
    let moved = label
        .polygon
        .as_deref()
        .and_then(|p| rotated_box_from_polygon(p, m).ok())
        .unwrap_or_else(|| rotated_box_from_corners(&label.bbox, m));
    let clipped = moved.clip(canvas.0 as f32, canvas.1 as f32);
    if !clipped.is_valid() || moved.area() <= 0.0 {
        return None;
    }
    Some(BoxLabel {
        class_id: label.class_id,
        bbox: clipped,
        polygon: label.polygon.as_ref().map(|p| p.iter().map(|&v| m.apply_f32(v)).collect()),
        visible: label.visible * clipped.area() / moved.area(),
    })
}

/// Rounds a non-negative value to the nearest byte. Avoids the libm call
/// behind `f32::round` in per-pixel loops.
#[inline]
pub(crate) fn round_u8(v: f32) -> u8 {
    (v + 0.5) as u8
}

/// Inverse-mapped bilinear warp; pixels mapping outside the source are gray.
pub fn warp_image(src: &RgbImage, m: &Affine, canvas: (u32, u32)) -> Result<RgbImage> {
    let inv = m.inverse()?;
    let (sw, sh) = (src.width() as i64, src.height() as i64);
    let raw = src.as_raw();
    let mut out = RgbImage::from_pixel(canvas.0, canvas.1, Rgb([PAD_GRAY; 3]));
    let [[a, b, tx], [c, d, ty]] = inv.0;
    let (cw, ch) = (canvas.0 as usize, canvas.1 as usize);
    let buf: &mut [u8] = &mut out;
    let tap = |xx: i64, yy: i64| -> [f32; 3] {
        if xx < 0 || yy < 0 || xx >= sw || yy >= sh {
            [PAD_GRAY as f32; 3]
        } else {
            let o = ((yy * sw + xx) * 3) as usize;
            [raw[o] as f32, raw[o + 1] as f32, raw[o + 2] as f32]
        }
    };
    for y in 0..ch {
        let py = y as f64 + 0.5;
        for x in 0..cw {
            let px = x as f64 + 0.5;
            let sx = a * px + b * py + tx - 0.5;
            let sy = c * px + d * py + ty - 0.5;
            if sx <= -1.0 || sy <= -1.0 || sx >= sw as f64 || sy >= sh as f64 {
                continue;
            }
            // sx, sy > -1 here, so truncation of the shifted value is a floor.
            let (x0, y0) = ((sx + 1.0) as i64 - 1, (sy + 1.0) as i64 - 1);
            let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
            let o = (y * cw + x) * 3;
            if x0 >= 0 && y0 >= 0 && x0 + 1 < sw && y0 + 1 < sh {
                let r0 = ((y0 * sw + x0) * 3) as usize;
                let r1 = r0 + sw as usize * 3;
                for k in 0..3 {
                    let top = raw[r0 + k] as f32 * (1.0 - fx) + raw[r0 + 3 + k] as f32 * fx;
                    let bot = raw[r1 + k] as f32 * (1.0 - fx) + raw[r1 + 3 + k] as f32 * fx;
                    buf[o + k] = round_u8(top * (1.0 - fy) + bot * fy);
                }
                continue;
            }
            let (p00, p01, p10, p11) = (tap(x0, y0), tap(x0 + 1, y0), tap(x0, y0 + 1), tap(x0 + 1, y0 + 1));
            for k in 0..3 {
                let top = p00[k] * (1.0 - fx) + p01[k] * fx;
                let bot = p10[k] * (1.0 - fx) + p11[k] * fx;
                buf[o + k] = round_u8(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(out)
}

/// Warps the image onto a `canvas` and moves every label with it, using the
/// outline when one is available.
pub fn affine_augment(sample: &Sample, params: &AffineParams, canvas: (u32, u32)) -> Result<Sample> {
    if canvas.0 == 0 || canvas.1 == 0 {
        return Err(Error::invalid("canvas", "dimensions must be positive"));
    }
    let m = params.matrix((sample.width(), sample.height()), canvas)?;
    apply_affine(sample, &m, canvas)
}

pub(crate) fn apply_affine(sample: &Sample, m: &Affine, canvas: (u32, u32)) -> Result<Sample> {
    let image = if *m == Affine::IDENTITY && canvas == (sample.width(), sample.height()) {
        sample.image.clone()
    } else {
        warp_image(&sample.image, m, canvas)?
    };
    let labels = sample.labels.iter().filter_map(|l| transform_label(l, m, canvas)).collect();
    Ok(Sample { image, labels, source_id: sample.source_id.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &BBox, b: &BBox, tol: f32) -> bool {
        a.to_f64().iter().zip(b.to_f64()).all(|(x, y)| (x - y).abs() <= tol as f64)
    }

    #[test]
    fn inverse_round_trip() {
        let m = Affine::rotate_deg(33.0).then_after(&Affine::scale(1.7, 0.6)).then_after(&Affine::translate(3.0, -2.0));
        let p = m.inverse().unwrap().apply(m.apply([4.0, 9.0]));
        assert!((p[0] - 4.0).abs() < 1e-9 && (p[1] - 9.0).abs() < 1e-9);
        assert!(Affine::scale(0.0, 1.0).inverse().is_err());
    }

    #[test]
    fn corner_box_of_rotated_unit_square() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        let m = Affine::translate(0.5, 0.5)
            .then_after(&Affine::rotate_deg(45.0))
            .then_after(&Affine::translate(-0.5, -0.5));
        let r = rotated_box_from_corners(&b, &m);
        assert!((r.width() - 2f32.sqrt()).abs() < 1e-5);
        assert!(close(&BBox::from_center(0.5, 0.5, r.width(), r.height()), &r, 1e-5));
        assert_eq!(rotated_box_from_corners(&b, &Affine::translate(2.0, 3.0)), BBox::new(2.0, 3.0, 3.0, 4.0));
    }

    #[test]
    fn tilted_rectangle_polygon_is_tighter() {
        // A thin rectangle tilted by 45°; rotating back by −45° makes it axis-aligned.
        let m = Affine::rotate_deg(45.0);
        let rect = [[0.0, 0.0], [10.0, 0.0], [10.0, 1.0], [0.0, 1.0]];
        let tilted: Vec<[f32; 2]> = rect.iter().map(|&p| m.apply_f32(p)).collect();
        let back = Affine::rotate_deg(-45.0);
        let poly = rotated_box_from_polygon(&tilted, &back).unwrap();
        let corners = rotated_box_from_corners(&BBox::bounding(&tilted).unwrap(), &back);
        assert!(poly.area() < corners.area() * 0.5);
        assert!(corners.contains(&poly, 1e-4));
        assert!(close(&poly, &BBox::new(0.0, 0.0, 10.0, 1.0), 1e-4));
    }

    #[test]
    fn degenerate_polygon_errors() {
        assert!(rotated_box_from_polygon(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], &Affine::IDENTITY).is_err());
        assert!(rotated_box_from_polygon(&[[0.0, 0.0], [1.0, 1.0]], &Affine::IDENTITY).is_err());
    }

    #[test]
    fn triangle_scaled_by_two() {
        let tri = [[1.0, 1.0], [5.0, 1.0], [3.0, 4.0]];
        assert_eq!(rotated_box_from_polygon(&tri, &Affine::scale(2.0, 2.0)).unwrap(), BBox::new(2.0, 2.0, 10.0, 8.0));
    }

    fn sample(w: u32, h: u32, label: BBox) -> Sample {
        let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 3) as u8, (y * 5) as u8, ((x + y) % 251) as u8]));
        Sample::new(img, vec![BoxLabel::new(0, label)], "s")
    }

    #[test]
    fn identity_params_keep_sample() {
        let s = sample(40, 30, BBox::new(3.0, 4.0, 20.0, 25.0));
        let out = affine_augment(&s, &AffineParams::default(), (40, 30)).unwrap();
        assert_eq!(out.image, s.image);
        assert!(close(&out.labels[0].bbox, &s.labels[0].bbox, 0.5));
    }

    #[test]
    fn flip_mirrors_box_and_pixels() {
        let s = sample(64, 48, BBox::new(10.0, 20.0, 30.0, 40.0));
        let p = AffineParams { flip_lr: true, ..Default::default() };
        let out = affine_augment(&s, &p, (64, 48)).unwrap();
        assert!(close(&out.labels[0].bbox, &BBox::new(34.0, 20.0, 54.0, 40.0), 1e-4));
        assert_eq!(out.image.get_pixel(0, 7), s.image.get_pixel(63, 7));
    }

    #[test]
    fn quarter_turn_of_centered_square() {
        let s = sample(50, 50, BBox::new(15.0, 15.0, 35.0, 35.0));
        let p = AffineParams { rotation_deg: 90.0, ..Default::default() };
        let out = affine_augment(&s, &p, (50, 50)).unwrap();
        assert!(close(&out.labels[0].bbox, &s.labels[0].bbox, 1.0));
    }

    #[test]
    fn partially_outside_label_loses_visibility() {
        let s = sample(40, 40, BBox::new(0.0, 0.0, 20.0, 20.0));
        let p = AffineParams { translate_frac: [-0.25, 0.0], ..Default::default() };
        let out = affine_augment(&s, &p, (40, 40)).unwrap();
        let l = &out.labels[0];
        assert!(close(&l.bbox, &BBox::new(0.0, 0.0, 10.0, 20.0), 1e-4));
        assert!((l.visible - 0.5).abs() < 1e-5);
    }
}
