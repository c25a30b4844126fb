//! Samples, COCO-format ingestion, the synthetic shapes generator and
//! letterboxing.

mod coco;
mod letterbox;
mod shapes;

pub use coco::{load_coco, write_coco, LoadReport};
pub use letterbox::{adapt_input_size, letterbox, letterbox_image, LetterboxTransform, PAD_GRAY};
pub use shapes::{gen_shapes, load_dataset_dir, save_dataset, ShapeKind, ShapesConfig};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::geometry::BBox;
use crate::nn::Tensor;

/// One object annotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub class_id: usize,
    pub bbox: BBox,
    /// Segmentation outline in pixel coordinates.
    pub polygon: Option<Vec<[f32; 2]>>,
    /// Fraction of the original object still inside the canvas after
    /// geometric augmentation. 1.0 for untouched labels.
    pub visible: f32,
}

impl BoxLabel {
    pub fn new(class_id: usize, bbox: BBox) -> Self {
        Self { class_id, bbox, polygon: None, visible: 1.0 }
    }

    pub fn with_polygon(mut self, polygon: Vec<[f32; 2]>) -> Self {
        self.polygon = Some(polygon);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: Vec<BoxLabel>,
    pub source_id: String,
}

impl Sample {
    pub fn new(image: RgbImage, labels: Vec<BoxLabel>, source_id: impl Into<String>) -> Self {
        Self { image, labels, source_id: source_id.into() }
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }
    pub fn height(&self) -> u32 {
        self.image.height()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Contiguous class names; `class_id` indexes this list.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
    pub fn label_count(&self) -> usize {
        self.samples.iter().map(|s| s.labels.len()).sum()
    }
}

/// Packs same-sized images into an `[N, 3, H, W]` tensor scaled to `[0, 1]`.
pub fn images_to_tensor(images: &[&RgbImage]) -> crate::Result<Tensor> {
    let first = images.first().ok_or_else(|| crate::Error::invalid("images", "empty batch"))?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if (img.width() as usize, img.height() as usize) != (w, h) {
            return Err(crate::Error::shape(
                "images_to_tensor",
                format!("image {b} is {}x{}, expected {w}x{h}", img.width(), img.height()),
            ));
        }
        let base = b * 3 * plane;
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = px[c] as f32 / 255.0;
            }
        }
    }
    Tensor::new([images.len(), 3, h, w], data)
}
