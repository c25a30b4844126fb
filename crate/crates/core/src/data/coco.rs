use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoxLabel, Dataset, Sample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::io::write_atomic;

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    height: Option<u32>,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
    /// Polygon lists, or an RLE object for crowd regions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    segmentation: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// What `load_coco` kept and dropped.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub images: usize,
    pub annotations: usize,
    pub crowd_skipped: usize,
    /// Annotations whose box had no area after clipping to the image.
    pub degenerate_skipped: usize,
    /// Annotations lost with images that could not be read.
    pub dropped_with_images: usize,
    pub labels: usize,
    pub warnings: Vec<String>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let before: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    before + column.saturating_sub(1)
}

fn parse_polygons(seg: &serde_json::Value) -> Option<Vec<[f32; 2]>> {
    let parts = seg.as_array()?;
    let mut points = Vec::new();
    for part in parts {
        let coords: Vec<f64> = part.as_array()?.iter().filter_map(serde_json::Value::as_f64).collect();
        points.extend(coords.chunks_exact(2).map(|c| [c[0] as f32, c[1] as f32]));
    }
    (points.len() >= 3).then_some(points)
}

/// Reads a COCO-format annotation file. Category ids are remapped to
/// contiguous indices in ascending id order.
pub fn load_coco(annotation_file: &Path, image_root: &Path) -> Result<(Dataset, LoadReport)> {
    let text = std::fs::read_to_string(annotation_file)?;
    let file: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::Json { offset: byte_offset(&text, e.line(), e.column()), message: e.to_string() })?;

    let mut cats: Vec<&CocoCategory> = file.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let class_of: HashMap<u64, usize> = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect();

    let mut per_image: BTreeMap<u64, Vec<&CocoAnnotation>> = file.images.iter().map(|im| (im.id, Vec::new())).collect();
    let mut report =
        LoadReport { images: file.images.len(), annotations: file.annotations.len(), ..Default::default() };
    for a in &file.annotations {
        per_image.get_mut(&a.image_id).ok_or(Error::UnknownImage(a.image_id))?.push(a);
    }

    let mut samples = Vec::with_capacity(file.images.len());
    for im in &file.images {
        let anns = &per_image[&im.id];
        let path = image_root.join(&im.file_name);
        let image = match image::open(&path) {
            Ok(img) => img.to_rgb8(),
            Err(e) => {
                let msg = format!("dropping image {} ({}): {e}", im.id, path.display());
                log::warn!("{msg}");
                report.warnings.push(msg);
                report.dropped_with_images += anns.iter().filter(|a| a.iscrowd == 0).count();
                report.crowd_skipped += anns.iter().filter(|a| a.iscrowd != 0).count();
                continue;
            }
        };
        let (w, h) = (image.width() as f32, image.height() as f32);
        let mut labels = Vec::new();
        for a in anns {
            if a.iscrowd != 0 {
                report.crowd_skipped += 1;
                continue;
            }
            let class_id = *class_of.get(&a.category_id).ok_or_else(|| {
                Error::invalid("category_id", format!("annotation {} uses undeclared category {}", a.id, a.category_id))
            })?;
            let [x, y, bw, bh] = a.bbox;
            let bbox = BBox::new(x as f32, y as f32, (x + bw) as f32, (y + bh) as f32).clip(w, h);
            if !bbox.is_valid() {
                report.degenerate_skipped += 1;
                continue;
            }
            let mut label = BoxLabel::new(class_id, bbox);
            label.polygon = a.segmentation.as_ref().and_then(parse_polygons);
            labels.push(label);
        }
        report.labels += labels.len();
        samples.push(Sample { image, labels, source_id: im.file_name.clone() });
    }
    let class_names = cats.iter().map(|c| c.name.clone()).collect();
    Ok((Dataset { samples, class_names }, report))
}

/// Writes a COCO annotation file; `file_names[i]` names sample `i`'s image.
/// Image ids and category ids are 1-based.
pub fn write_coco(dataset: &Dataset, file_names: &[String], path: &Path) -> Result<()> {
    let mut annotations = Vec::new();
    let images = dataset
        .samples
        .iter()
        .zip(file_names)
        .enumerate()
        .map(|(i, (s, name))| {
            for l in &s.labels {
                let b = l.bbox;
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64 + 1,
                    image_id: i as u64 + 1,
                    category_id: l.class_id as u64 + 1,
                    bbox: [b.x1 as f64, b.y1 as f64, b.width() as f64, b.height() as f64],
                    area: b.area() as f64,
                    iscrowd: 0,
                    segmentation: l.polygon.as_ref().map(|p| {
                        serde_json::json!([p.iter().flat_map(|v| [v[0] as f64, v[1] as f64]).collect::<Vec<_>>()])
                    }),
                });
            }
            CocoImage { id: i as u64 + 1, file_name: name.clone(), width: Some(s.width()), height: Some(s.height()) }
        })
        .collect();
    let categories = dataset
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| CocoCategory { id: i as u64 + 1, name: n.clone() })
        .collect();
    let json = serde_json::to_vec(&CocoFile { images, annotations, categories })
        .map_err(|e| Error::Json { offset: 0, message: e.to_string() })?;
    write_atomic(path, &json)
}
