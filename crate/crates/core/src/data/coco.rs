//! COCO-schema annotation files and the in-memory dataset they describe.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoxA, Detection};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file_name: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

/// One validated object annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub id: u64,
    pub image_id: u64,
    pub file_name: String,
    pub category_id: u64,
    pub bbox: BoxA,
    pub area: f64,
    pub iscrowd: bool,
}

/// Images, annotations and categories of one split.
///
/// Records are ordered by image id, then annotation id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub records: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
}

/// One entry of the COCO results schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl Dataset {
    /// Builds a dataset, validating every annotation.
    pub fn new(mut images: Vec<ImageInfo>, records: Vec<AnnotationRecord>, mut categories: Vec<Category>) -> Result<Self> {
        images.sort_by_key(|i| i.id);
        categories.sort_by_key(|c| c.id);
        let mut ds = Self {
            images,
            records,
            categories,
        };
        ds.validate()?;
        ds.records.sort_by_key(|r| (r.image_id, r.id));
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for img in &self.images {
            if seen.insert(img.id, ()).is_some() {
                return Err(Error::Annotation(format!("duplicate image id {}", img.id)));
            }
        }
        for r in &self.records {
            if !seen.contains_key(&r.image_id) {
                return Err(Error::Annotation(format!(
                    "annotation {} references unknown image id {}",
                    r.id, r.image_id
                )));
            }
            if self.category_index(r.category_id).is_none() {
                return Err(Error::Annotation(format!(
                    "annotation {} references unknown category id {}",
                    r.id, r.category_id
                )));
            }
            if !(r.bbox.width() > 0.0 && r.bbox.height() > 0.0) {
                return Err(Error::Annotation(format!("annotation {} has a non-positive box size", r.id)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    /// Position of a category id in the (id-sorted) category table; the model label.
    pub fn category_index(&self, id: u64) -> Option<usize> {
        self.categories.binary_search_by_key(&id, |c| c.id).ok()
    }

    pub fn category_id(&self, index: usize) -> u64 {
        self.categories[index].id
    }

    pub fn image(&self, id: u64) -> Option<&ImageInfo> {
        self.images.binary_search_by_key(&id, |i| i.id).ok().map(|k| &self.images[k])
    }

    /// Records grouped by image id.
    pub fn records_by_image(&self) -> BTreeMap<u64, Vec<&AnnotationRecord>> {
        let mut out: BTreeMap<u64, Vec<&AnnotationRecord>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for r in &self.records {
            out.entry(r.image_id).or_default().push(r);
        }
        out
    }

    /// Subset with the given images (and their annotations).
    pub fn subset(&self, ids: &[u64]) -> Self {
        let keep: HashMap<u64, ()> = ids.iter().map(|&i| (i, ())).collect();
        Self {
            images: self.images.iter().filter(|i| keep.contains_key(&i.id)).cloned().collect(),
            records: self
                .records
                .iter()
                .filter(|r| keep.contains_key(&r.image_id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let raw = RawFile {
            images: self.images.clone(),
            annotations: self
                .records
                .iter()
                .map(|r| RawAnnotation {
                    id: r.id,
                    image_id: r.image_id,
                    category_id: r.category_id,
                    bbox: r.bbox.to_xywh(),
                    area: Some(r.area),
                    iscrowd: r.iscrowd as u8,
                })
                .collect(),
            categories: self.categories.clone(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawFile = serde_json::from_str(text).map_err(|e| Error::Annotation(format!("invalid COCO file: {e}")))?;
        let names: HashMap<u64, String> = raw.images.iter().map(|i| (i.id, i.file_name.clone())).collect();
        let mut records = Vec::with_capacity(raw.annotations.len());
        for a in raw.annotations {
            let [x, y, w, h] = a.bbox;
            if !(w > 0.0 && h > 0.0) {
                return Err(Error::Annotation(format!("annotation {} has a non-positive box size", a.id)));
            }
            let bbox = BoxA::from_xywh(x, y, w, h).map_err(|e| Error::Annotation(format!("annotation {}: {e}", a.id)))?;
            records.push(AnnotationRecord {
                id: a.id,
                image_id: a.image_id,
                file_name: names.get(&a.image_id).cloned().unwrap_or_default(),
                category_id: a.category_id,
                bbox,
                area: a.area.unwrap_or(w * h),
                iscrowd: a.iscrowd != 0,
            });
        }
        Self::new(raw.images, records, raw.categories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a COCO annotation file.
pub fn load_coco(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_json(&text)
}

/// Detections of one image in absolute pixels; `category` holds the category id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImagePredictions {
    pub image_id: u64,
    pub detections: Vec<Detection>,
}

pub fn to_results(preds: &[ImagePredictions]) -> Vec<ResultRecord> {
    preds
        .iter()
        .flat_map(|p| {
            p.detections.iter().map(move |d| ResultRecord {
                image_id: p.image_id,
                category_id: d.category as u64,
                bbox: d.bbox.to_xywh(),
                score: d.score,
            })
        })
        .collect()
}

pub fn save_results(path: &Path, preds: &[ImagePredictions]) -> Result<()> {
    let text = serde_json::to_string_pretty(&to_results(preds))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "file_name": "a.png", "width": 64, "height": 48}],
        "annotations": [{"id": 7, "image_id": 1, "category_id": 3, "bbox": [1.0, 2.0, 10.0, 5.0], "area": 50.0, "iscrowd": 0}],
        "categories": [{"id": 3, "name": "circle"}]
    }"#;

    #[test]
    fn minimal_file() {
        let ds = Dataset::from_json(MINIMAL).unwrap();
        assert_eq!(ds.records.len(), 1);
        let r = &ds.records[0];
        assert_eq!((r.image_id, r.category_id, r.file_name.as_str()), (1, 3, "a.png"));
        assert_eq!(r.bbox.to_xywh(), [1.0, 2.0, 10.0, 5.0]);
        assert_eq!(ds.category_index(3), Some(0));
    }

    #[test]
    fn unknown_category_is_named() {
        let bad = MINIMAL.replace("\"category_id\": 3", "\"category_id\": 9");
        let err = Dataset::from_json(&bad).unwrap_err().to_string();
        assert!(err.contains("unknown category id 9"), "{err}");
    }

    #[test]
    fn missing_key_and_bad_size() {
        let no_bbox = MINIMAL.replace("\"bbox\": [1.0, 2.0, 10.0, 5.0], ", "");
        assert!(Dataset::from_json(&no_bbox).unwrap_err().to_string().contains("bbox"));
        let flat = MINIMAL.replace("10.0, 5.0", "10.0, 0.0");
        assert!(Dataset::from_json(&flat).is_err());
    }

    #[test]
    fn records_sorted_and_json_round_trip() {
        let text = r#"{
            "images": [{"id": 5, "file_name": "b.png", "width": 10, "height": 10},
                       {"id": 2, "file_name": "a.png", "width": 10, "height": 10}],
            "annotations": [{"id": 4, "image_id": 5, "category_id": 1, "bbox": [0, 0, 2, 2]},
                            {"id": 9, "image_id": 2, "category_id": 1, "bbox": [1, 1, 3, 3]},
                            {"id": 1, "image_id": 5, "category_id": 1, "bbox": [2, 2, 1, 1]}],
            "categories": [{"id": 1, "name": "square"}]
        }"#;
        let ds = Dataset::from_json(text).unwrap();
        let order: Vec<(u64, u64)> = ds.records.iter().map(|r| (r.image_id, r.id)).collect();
        assert_eq!(order, vec![(2, 9), (5, 1), (5, 4)]);
        assert_eq!(ds.records[2].area, 4.0);
        assert_eq!(Dataset::from_json(&ds.to_json().unwrap()).unwrap(), ds);
    }
}
