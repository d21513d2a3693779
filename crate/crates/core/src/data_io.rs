//! COCO-subset annotations, detections JSON, and report writers.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::metrics::{EvalDetection, GroundTruth, HeldOut};
use crate::pipeline::PseudoLabelSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    /// Original category id.
    pub category_id: u64,
    /// Dense class index into [`Dataset::categories`].
    pub class_id: usize,
    pub bbox: BBox,
}

/// Validated annotations. Categories are sorted by id; a category's position
/// is its dense class index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    categories: Vec<Category>,
    images: Vec<ImageInfo>,
    annotations: Vec<Annotation>,
    class_of: HashMap<u64, usize>,
}

impl Dataset {
    /// Build from parts, validating references. `annotations` carry original
    /// category ids; dense class ids are assigned here.
    pub fn new(
        mut categories: Vec<Category>,
        images: Vec<ImageInfo>,
        annotations: Vec<(u64, u64, u64, BBox)>,
    ) -> Result<Self> {
        categories.sort_by_key(|c| c.id);
        let mut class_of = HashMap::new();
        for (i, c) in categories.iter().enumerate() {
            if class_of.insert(c.id, i).is_some() {
                return Err(Error::InvalidRecord {
                    record: format!("category {}", c.id),
                    reason: "duplicate category id".into(),
                });
            }
        }
        let mut image_ids = HashSet::new();
        for img in &images {
            if !image_ids.insert(img.id) {
                return Err(Error::InvalidRecord {
                    record: format!("image {}", img.id),
                    reason: "duplicate image id".into(),
                });
            }
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::InvalidRecord {
                    record: format!("image {}", img.id),
                    reason: format!("non-positive size {}x{}", img.width, img.height),
                });
            }
        }
        let annotations = annotations
            .into_iter()
            .map(|(id, image_id, category_id, bbox)| {
                let record = || format!("annotation {id}");
                if !image_ids.contains(&image_id) {
                    return Err(Error::InvalidRecord {
                        record: record(),
                        reason: format!("unknown image_id {image_id}"),
                    });
                }
                let class_id = *class_of.get(&category_id).ok_or_else(|| Error::InvalidRecord {
                    record: record(),
                    reason: format!("unknown category_id {category_id}"),
                })?;
                Ok(Annotation {
                    id,
                    image_id,
                    category_id,
                    class_id,
                    bbox,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            categories,
            images,
            annotations,
            class_of,
        })
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn class_of(&self, category_id: u64) -> Option<usize> {
        self.class_of.get(&category_id).copied()
    }

    pub fn category_id(&self, class_id: usize) -> Option<u64> {
        self.categories.get(class_id).map(|c| c.id)
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Annotations grouped by image; every image appears, possibly empty.
    pub fn heldout(&self) -> HeldOut {
        let mut out: HeldOut = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            out.entry(a.image_id).or_default().push((a.bbox, a.class_id));
        }
        out
    }

    pub fn ground_truths(&self) -> Vec<GroundTruth> {
        self.annotations
            .iter()
            .map(|a| GroundTruth {
                image_id: a.image_id,
                class_id: a.class_id,
                bbox: a.bbox,
            })
            .collect()
    }

    fn to_json(&self) -> Value {
        let anns: Vec<Value> = self
            .annotations
            .iter()
            .map(|a| {
                serde_json::json!({
                    "id": a.id,
                    "image_id": a.image_id,
                    "category_id": a.category_id,
                    "bbox": a.bbox.to_xywh(),
                })
            })
            .collect();
        serde_json::json!({
            "categories": self.categories,
            "images": self.images,
            "annotations": anns,
        })
    }
}

fn field<'a>(obj: &'a Value, record: &str, key: &'static str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::MissingField {
        record: record.to_string(),
        field: key,
    })
}

fn as_u64(v: &Value, record: &str, key: &str) -> Result<u64> {
    v.as_u64().ok_or_else(|| Error::InvalidRecord {
        record: record.to_string(),
        reason: format!("`{key}` must be a nonnegative integer, got {v}"),
    })
}

fn as_f64(v: &Value, record: &str, key: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| Error::InvalidRecord {
        record: record.to_string(),
        reason: format!("`{key}` must be a number, got {v}"),
    })
}

fn array<'a>(root: &'a Value, key: &'static str) -> Result<&'a Vec<Value>> {
    field(root, "dataset", key)?
        .as_array()
        .ok_or_else(|| Error::InvalidRecord {
            record: "dataset".into(),
            reason: format!("`{key}` must be an array"),
        })
}

fn read_json(path: &Path) -> Result<Value> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

/// Parse a COCO-subset dataset from a JSON value. Unknown keys are ignored.
pub fn parse_dataset(root: &Value) -> Result<Dataset> {
    let mut categories = Vec::new();
    for (i, c) in array(root, "categories")?.iter().enumerate() {
        let record = format!("categories[{i}]");
        let id = as_u64(field(c, &record, "id")?, &record, "id")?;
        let name = field(c, &record, "name")?
            .as_str()
            .ok_or_else(|| Error::InvalidRecord {
                record: record.clone(),
                reason: "`name` must be a string".into(),
            })?
            .to_string();
        categories.push(Category { id, name });
    }
    let mut images = Vec::new();
    for (i, img) in array(root, "images")?.iter().enumerate() {
        let record = format!("images[{i}]");
        images.push(ImageInfo {
            id: as_u64(field(img, &record, "id")?, &record, "id")?,
            width: as_f64(field(img, &record, "width")?, &record, "width")?,
            height: as_f64(field(img, &record, "height")?, &record, "height")?,
        });
    }
    let mut annotations = Vec::new();
    for (i, a) in array(root, "annotations")?.iter().enumerate() {
        let mut record = format!("annotations[{i}]");
        let id = as_u64(field(a, &record, "id")?, &record, "id")?;
        record = format!("annotation {id}");
        let image_id = as_u64(field(a, &record, "image_id")?, &record, "image_id")?;
        let category_id = as_u64(field(a, &record, "category_id")?, &record, "category_id")?;
        let bbox = parse_xywh(field(a, &record, "bbox")?, &record)?;
        annotations.push((id, image_id, category_id, bbox));
    }
    Dataset::new(categories, images, annotations)
}

fn parse_xywh(v: &Value, record: &str) -> Result<BBox> {
    let bad = |reason: String| Error::InvalidRecord {
        record: record.to_string(),
        reason,
    };
    let arr = v
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| bad(format!("`bbox` must be [x, y, w, h], got {v}")))?;
    let mut xywh = [0.0; 4];
    for (slot, x) in xywh.iter_mut().zip(arr) {
        *slot = as_f64(x, record, "bbox")?;
    }
    BBox::from_xywh(xywh[0], xywh[1], xywh[2], xywh[3]).map_err(|e| bad(e.to_string()))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&read_json(path.as_ref())?)
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_json(&dataset.to_json(), path)
}

/// One entry of a detections JSON array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub category_id: u64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    /// Classification confidence.
    pub score: f64,
    /// Localization quality; absent in plain COCO results files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loc_quality: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combined: Option<f64>,
}

impl DetectionRecord {
    /// Convert to an image id plus [`Detection`]; a missing `loc_quality`
    /// counts as 1.
    pub fn to_detection(&self, dataset: &Dataset, index: usize) -> Result<(u64, Detection)> {
        let record = format!("detections[{index}]");
        let class_id = dataset
            .class_of(self.category_id)
            .ok_or_else(|| Error::InvalidRecord {
                record: record.clone(),
                reason: format!("unknown category_id {}", self.category_id),
            })?;
        if dataset.image(self.image_id).is_none() {
            return Err(Error::InvalidRecord {
                record,
                reason: format!("unknown image_id {}", self.image_id),
            });
        }
        let [x, y, w, h] = self.bbox;
        let bbox = BBox::from_xywh(x, y, w, h).map_err(|e| Error::InvalidRecord {
            record: record.clone(),
            reason: e.to_string(),
        })?;
        let det = Detection::new(bbox, class_id, self.score, self.loc_quality.unwrap_or(1.0)).map_err(|e| {
            Error::InvalidRecord {
                record,
                reason: e.to_string(),
            }
        })?;
        Ok((self.image_id, det))
    }
}

/// Flatten pseudo-label sets into detection records; `category_ids[class]`
/// gives the original category id of each dense class.
pub fn records_from_sets(sets: &[PseudoLabelSet], category_ids: &[u64]) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for set in sets {
        for l in &set.labels {
            let category_id = *category_ids.get(l.class_id).ok_or(Error::UnknownClass {
                class_id: l.class_id,
                num_classes: category_ids.len(),
            })?;
            out.push(DetectionRecord {
                image_id: set.image_id,
                category_id,
                bbox: l.bbox.to_xywh(),
                score: l.p,
                loc_quality: Some(l.v),
                combined: Some(l.combined),
            });
        }
    }
    Ok(out)
}

pub fn write_detections(sets: &[PseudoLabelSet], category_ids: &[u64], path: impl AsRef<Path>) -> Result<()> {
    write_json(&records_from_sets(sets, category_ids)?, path)
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionRecord>> {
    let path = path.as_ref();
    let value = read_json(path)?;
    let items = value.as_array().ok_or_else(|| Error::InvalidRecord {
        record: path.display().to_string(),
        reason: "detections file must be a JSON array".into(),
    })?;
    items
        .iter()
        .enumerate()
        .map(|(i, v)| {
            DetectionRecord::deserialize(v).map_err(|e| Error::InvalidRecord {
                record: format!("detections[{i}]"),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Detections grouped by image id, in input order within each image.
pub fn detections_by_image(records: &[DetectionRecord], dataset: &Dataset) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let mut out: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let (image_id, det) = r.to_detection(dataset, i)?;
        out.entry(image_id).or_default().push(det);
    }
    Ok(out)
}

pub fn eval_detections(records: &[DetectionRecord], dataset: &Dataset) -> Result<Vec<EvalDetection>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (image_id, d) = r.to_detection(dataset, i)?;
            Ok(EvalDetection {
                image_id,
                class_id: d.class_id,
                bbox: d.bbox,
                score: r.score,
            })
        })
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::json(path, e))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json_as<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::json(path, e))
}

pub const CSV_HEADER: [&str; 4] = ["class", "iou_threshold", "metric", "value"];

/// Write `(class, iou_threshold, metric, value)` rows with a header, LF line
/// endings.
pub fn write_csv_rows(rows: &[(String, String, String, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for (class, thr, metric, value) in rows {
        w.write_record([class.as_str(), thr.as_str(), metric.as_str(), &value.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv_rows(path: impl AsRef<Path>) -> Result<Vec<(String, String, String, f64)>> {
    let path = path.as_ref();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let value = rec[3].parse::<f64>().map_err(|e| Error::InvalidRecord {
            record: format!("{} row {}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        rows.push((rec[0].to_string(), rec[1].to_string(), rec[2].to_string(), value));
    }
    Ok(rows)
}
