use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::coco::{load_coco, write_coco, LoadReport};
use super::{BoxLabel, Dataset, Sample};
use crate::error::Result;
use crate::geometry::BBox;
use crate::io::write_png;
use crate::rng::{derive_seed, keyed};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle = 0,
    Square = 1,
    Triangle = 2,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub n_images: usize,
    pub image_size: u32,
    pub max_objects: usize,
    pub min_side: u32,
    pub max_side: u32,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self { n_images: 100, image_size: 320, max_objects: 6, min_side: 8, max_side: 64, seed: 0 }
    }
}

const CIRCLE_VERTICES: usize = 32;
const PLACEMENT_TRIES: usize = 64;

/// Deterministic images of non-overlapping circles, squares and triangles
/// with exact boxes and outlines. Image `i` depends only on `(seed, i)`.
pub fn gen_shapes(cfg: &ShapesConfig) -> Dataset {
    let seed = derive_seed(cfg.seed, "shapes");
    let samples = (0..cfg.n_images.max(1)).map(|i| gen_image(cfg, &mut keyed(seed, i as u64), i)).collect();
    Dataset { samples, class_names: ShapeKind::ALL.iter().map(|k| k.name().to_string()).collect() }
}

fn color_far_from(rng: &mut impl Rng, bg: [u8; 3]) -> [u8; 3] {
    loop {
        let c = [rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>()];
        let d: i32 = c.iter().zip(&bg).map(|(&a, &b)| (a as i32 - b as i32).abs()).sum();
        if d >= 160 {
            return c;
        }
    }
}

fn gen_image(cfg: &ShapesConfig, rng: &mut impl Rng, index: usize) -> Sample {
    let size = cfg.image_size.max(cfg.min_side + 2);
    let max_side = cfg.max_side.clamp(cfg.min_side, size - 2);
    let bg = [rng.random_range(0..=255u8), rng.random_range(0..=255u8), rng.random_range(0..=255u8)];
    let mut image = RgbImage::from_pixel(size, size, Rgb(bg));
    let target = rng.random_range(1..=cfg.max_objects.max(1));
    let mut labels: Vec<BoxLabel> = Vec::new();
    let mut tries = 0;
    while labels.len() < target && tries < PLACEMENT_TRIES * target {
        tries += 1;
        let kind = ShapeKind::ALL[rng.random_range(0..3)];
        let side = rng.random_range(cfg.min_side..=max_side);
        let x0 = rng.random_range(0..=size - side);
        let y0 = rng.random_range(0..=size - side);
        let bbox = BBox::new(x0 as f32, y0 as f32, (x0 + side) as f32, (y0 + side) as f32);
        // One pixel of clearance keeps shapes visually separate.
        let grown = BBox::new(bbox.x1 - 1.0, bbox.y1 - 1.0, bbox.x2 + 1.0, bbox.y2 + 1.0);
        if labels.iter().any(|l| l.bbox.intersection(&grown) > 0.0) {
            continue;
        }
        let color = Rgb(color_far_from(rng, bg));
        let polygon = outline(kind, &bbox);
        raster(&mut image, kind, &bbox, &polygon, color);
        labels.push(BoxLabel::new(kind as usize, bbox).with_polygon(polygon));
    }
    // The first placement never collides, so every image holds at least one shape.
    Sample { image, labels, source_id: format!("{index:06}") }
}

fn outline(kind: ShapeKind, b: &BBox) -> Vec<[f32; 2]> {
    match kind {
        ShapeKind::Circle => {
            let (cx, cy) = b.center();
            let r = b.width() / 2.0;
            // Vertices at 0°, 90°, ... land on the box edges exactly.
            (0..CIRCLE_VERTICES)
                .map(|k| {
                    let a = k as f64 * std::f64::consts::TAU / CIRCLE_VERTICES as f64;
                    let quarter = CIRCLE_VERTICES / 4;
                    let (s, c) = if k % quarter == 0 {
                        [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)][k / quarter]
                    } else {
                        a.sin_cos()
                    };
                    [cx + r * c as f32, cy + r * s as f32]
                })
                .collect()
        }
        ShapeKind::Square => vec![[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]],
        ShapeKind::Triangle => vec![[b.x1, b.y2], [b.x2, b.y2], [(b.x1 + b.x2) / 2.0, b.y1]],
    }
}

fn inside_triangle(p: [f32; 2], t: &[[f32; 2]]) -> bool {
    let cross = |a: [f32; 2], b: [f32; 2], c: [f32; 2]| (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    let d1 = cross(t[0], t[1], p);
    let d2 = cross(t[1], t[2], p);
    let d3 = cross(t[2], t[0], p);
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

fn raster(img: &mut RgbImage, kind: ShapeKind, b: &BBox, polygon: &[[f32; 2]], color: Rgb<u8>) {
    let (cx, cy) = b.center();
    let r = b.width() / 2.0;
    for y in b.y1 as u32..b.y2 as u32 {
        for x in b.x1 as u32..b.x2 as u32 {
            let p = [x as f32 + 0.5, y as f32 + 0.5];
            let hit = match kind {
                ShapeKind::Square => true,
                ShapeKind::Circle => (p[0] - cx).powi(2) + (p[1] - cy).powi(2) <= r * r,
                ShapeKind::Triangle => inside_triangle(p, polygon),
            };
            if hit {
                img.put_pixel(x, y, color);
            }
        }
    }
}

/// Writes `images/<source_id>.png` and `annotations.json` under `dir`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    let mut names = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let name = format!("{}.png", s.source_id);
        write_png(&dir.join("images").join(&name), &s.image)?;
        names.push(name);
    }
    write_coco(dataset, &names, &dir.join("annotations.json"))
}

/// Reads a directory written by [`save_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<(Dataset, LoadReport)> {
    load_coco(&dir.join("annotations.json"), &dir.join("images"))
}
