//! File formats.
//!
//! Detections and annotations use the COCO result and annotation layouts
//! (`bbox` is `[x, y, width, height]` from the top-left corner). Models are a
//! single JSON document with a schema version. Every file is written as
//! canonical JSON: sorted keys, two-space indentation and the shortest float
//! text that parses back to the same value, so load and save are inverses.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{AnnotatedScene, CategoryMap, GroundTruth};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinningConfig, Cell, Detection, Placement};
use crate::relation::{PriorTable, RelationModel, RelationTable, Slot};

pub const MODEL_SCHEMA_VERSION: u32 = 1;
const MODEL_FORMAT: &str = "fnm-relation-model";

/// Canonical text of any serializable value.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::invalid(format!("serialization: {e}")))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::invalid(format!("serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    write_text(path, &to_canonical_json(value)?)
}

fn format_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn parse<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| format_error(path, e.to_string()))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse(&read_text(path)?, path)
}

/// One entry of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn record_error(path: &Path, index: usize, message: impl std::fmt::Display) -> Error {
    format_error(path, format!("record {index}: {message}"))
}

/// Parses detection records; `path` only labels errors. Records without an
/// `id` get their position in the file.
pub fn parse_detections(text: &str, categories: &CategoryMap, path: &Path) -> Result<Vec<Detection>> {
    let raw: Vec<Value> = parse(text, path)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let r: DetectionRecord = serde_json::from_value(v).map_err(|e| record_error(path, i, e))?;
            let name = categories
                .name(r.category_id)
                .ok_or_else(|| record_error(path, i, format!("unknown category id {}", r.category_id)))?;
            let [x, y, w, h] = r.bbox;
            let d = Detection {
                id: r.id.unwrap_or(i as u64),
                image_id: r.image_id,
                category: name.to_string(),
                placement: Placement::from_bbox(&BBox::new(x, y, w, h)),
                confidence: r.score,
            };
            d.validate().map_err(|e| record_error(path, i, e))?;
            Ok(d)
        })
        .collect()
}

pub fn load_detections(path: &Path, categories: &CategoryMap) -> Result<Vec<Detection>> {
    parse_detections(&read_text(path)?, categories, path)
}

pub fn detection_records(detections: &[Detection], categories: &CategoryMap) -> Result<Vec<DetectionRecord>> {
    detections
        .iter()
        .map(|d| {
            let b = d.placement.bbox();
            Ok(DetectionRecord {
                id: Some(d.id),
                image_id: d.image_id,
                category_id: categories
                    .id(&d.category)
                    .ok_or_else(|| Error::UnknownCategory(d.category.clone()))?,
                bbox: [b.x, b.y, b.width, b.height],
                score: d.confidence,
            })
        })
        .collect()
}

pub fn save_detections(detections: &[Detection], categories: &CategoryMap, path: &Path) -> Result<()> {
    save_json(&detection_records(detections, categories)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ImageRecord {
    id: u64,
    width: f64,
    height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CategoryRecord {
    id: u64,
    name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationRecord {
    #[serde(default)]
    id: Option<u64>,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AnnotationDocument {
    images: Vec<ImageRecord>,
    categories: Vec<CategoryRecord>,
    annotations: Vec<AnnotationRecord>,
}

/// Ground truth of a whole corpus.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub categories: CategoryMap,
    /// One entry per image, in file order.
    pub scenes: Vec<AnnotatedScene>,
    /// Non-fatal findings such as boxes slightly outside their image.
    pub warnings: Vec<String>,
}

impl AnnotationSet {
    pub fn ground_truth(&self) -> Vec<GroundTruth> {
        self.scenes.iter().flat_map(|s| s.objects.iter().cloned()).collect()
    }
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationSet> {
    let doc: AnnotationDocument = parse(text, path)?;
    let mut categories = CategoryMap::new();
    for c in &doc.categories {
        categories
            .insert(c.id, c.name.clone())
            .map_err(|e| format_error(path, e.to_string()))?;
    }
    let mut index = BTreeMap::new();
    let mut scenes = Vec::with_capacity(doc.images.len());
    for img in &doc.images {
        if index.insert(img.id, scenes.len()).is_some() {
            return Err(format_error(path, format!("image id {} listed twice", img.id)));
        }
        scenes.push(AnnotatedScene {
            image_id: img.id,
            width: img.width,
            height: img.height,
            objects: Vec::new(),
        });
    }
    let mut warnings = Vec::new();
    for (i, a) in doc.annotations.iter().enumerate() {
        let err = |m: String| format_error(path, format!("annotation {i}: {m}"));
        let slot = *index
            .get(&a.image_id)
            .ok_or_else(|| err(format!("unknown image id {}", a.image_id)))?;
        let name = categories
            .name(a.category_id)
            .ok_or_else(|| err(format!("unknown category id {}", a.category_id)))?;
        let [x, y, w, h] = a.bbox;
        let b = BBox::new(x, y, w, h);
        if !b.is_valid() {
            return Err(err("bbox must have positive width and height".into()));
        }
        let scene = &mut scenes[slot];
        if x < -1.0 || y < -1.0 || x + w > scene.width + 1.0 || y + h > scene.height + 1.0 {
            warnings.push(format!("annotation {i}: bbox extends outside image {}", a.image_id));
        }
        scene.objects.push(GroundTruth {
            id: a.id.unwrap_or(i as u64),
            image_id: a.image_id,
            category: name.to_string(),
            placement: Placement::from_bbox(&b),
        });
    }
    Ok(AnnotationSet {
        categories,
        scenes,
        warnings,
    })
}

pub fn load_annotations(path: &Path) -> Result<AnnotationSet> {
    parse_annotations(&read_text(path)?, path)
}

pub fn annotations_to_json(set: &AnnotationSet) -> Result<String> {
    let mut annotations = Vec::new();
    for s in &set.scenes {
        for o in &s.objects {
            let b = o.placement.bbox();
            annotations.push(AnnotationRecord {
                id: Some(o.id),
                image_id: s.image_id,
                category_id: set
                    .categories
                    .id(&o.category)
                    .ok_or_else(|| Error::UnknownCategory(o.category.clone()))?,
                bbox: [b.x, b.y, b.width, b.height],
            });
        }
    }
    let doc = AnnotationDocument {
        images: set
            .scenes
            .iter()
            .map(|s| ImageRecord {
                id: s.image_id,
                width: s.width,
                height: s.height,
            })
            .collect(),
        categories: set
            .categories
            .iter()
            .map(|(id, name)| CategoryRecord {
                id,
                name: name.to_string(),
            })
            .collect(),
        annotations,
    };
    to_canonical_json(&doc)
}

pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    write_text(path, &annotations_to_json(set)?)
}

/// A trained model plus the category ids used by detection files.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: RelationModel,
    pub category_ids: CategoryMap,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    schema_version: u32,
    format: String,
    binning: BinningConfig,
    categories: Vec<String>,
    category_ids: BTreeMap<String, u64>,
    smoothing: f64,
    max_neighbors: u8,
    pair_totals: Vec<u64>,
    /// `[reference, category, x, y, scale, count]`
    pair_counts: Vec<[u64; 6]>,
    /// `[reference, category_a, x_a, y_a, scale_a, category_b, x_b, y_b, scale_b, count]`
    triple_counts: Vec<[u64; 10]>,
    priors: PriorTable,
}

fn slot_fields(s: &Slot) -> [u64; 4] {
    [s.category as u64, s.cell.x as u64, s.cell.y as u64, s.cell.scale as u64]
}

fn slot_from(f: &[u64]) -> Option<Slot> {
    Some(Slot {
        category: u32::try_from(f[0]).ok()?,
        cell: Cell {
            x: u16::try_from(f[1]).ok()?,
            y: u16::try_from(f[2]).ok()?,
            scale: u16::try_from(f[3]).ok()?,
        },
    })
}

pub fn model_to_json(bundle: &ModelBundle) -> Result<String> {
    let t = &bundle.model.table;
    let doc = ModelDocument {
        schema_version: MODEL_SCHEMA_VERSION,
        format: MODEL_FORMAT.into(),
        binning: t.binning().clone(),
        categories: t.categories().to_vec(),
        category_ids: bundle.category_ids.iter().map(|(id, n)| (n.to_string(), id)).collect(),
        smoothing: t.smoothing(),
        max_neighbors: t.max_neighbors(),
        pair_totals: t.pair_totals().to_vec(),
        pair_counts: t
            .pair_entries()
            .into_iter()
            .map(|((r, s), c)| {
                let f = slot_fields(&s);
                [r as u64, f[0], f[1], f[2], f[3], c]
            })
            .collect(),
        triple_counts: t
            .triple_entries()
            .into_iter()
            .map(|((r, a, b), c)| {
                let (fa, fb) = (slot_fields(&a), slot_fields(&b));
                [r as u64, fa[0], fa[1], fa[2], fa[3], fb[0], fb[1], fb[2], fb[3], c]
            })
            .collect(),
        priors: bundle.model.priors.clone(),
    };
    to_canonical_json(&doc)
}

pub fn parse_model(text: &str, path: &Path) -> Result<ModelBundle> {
    let raw: Value = parse(text, path)?;
    let found = raw
        .get("schema_version")
        .and_then(Value::as_u64)
        .ok_or_else(|| format_error(path, "missing schema_version"))?;
    if found != MODEL_SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let doc: ModelDocument = serde_json::from_value(raw).map_err(|e| format_error(path, e.to_string()))?;
    if doc.format != MODEL_FORMAT {
        return Err(format_error(
            path,
            format!("not a model file (format `{}`)", doc.format),
        ));
    }
    let bad = |what: &str| format_error(path, format!("malformed {what} entry"));
    let pairs = doc
        .pair_counts
        .iter()
        .map(|e| {
            let r = u32::try_from(e[0]).map_err(|_| bad("pair"))?;
            Ok(((r, slot_from(&e[1..5]).ok_or_else(|| bad("pair"))?), e[5]))
        })
        .collect::<Result<Vec<_>>>()?;
    let triples = doc
        .triple_counts
        .iter()
        .map(|e| {
            let r = u32::try_from(e[0]).map_err(|_| bad("triple"))?;
            let a = slot_from(&e[1..5]).ok_or_else(|| bad("triple"))?;
            let b = slot_from(&e[5..9]).ok_or_else(|| bad("triple"))?;
            Ok(((r, a, b), e[9]))
        })
        .collect::<Result<Vec<_>>>()?;
    let table = RelationTable::from_counts(
        doc.binning,
        doc.max_neighbors,
        doc.smoothing,
        doc.pair_totals,
        pairs,
        triples,
    )
    .map_err(|e| format_error(path, e.to_string()))?;
    if table.categories() != doc.categories.as_slice() {
        return Err(format_error(
            path,
            "category list does not match the binning scale factors",
        ));
    }
    let mut category_ids = CategoryMap::new();
    for (name, id) in doc.category_ids {
        category_ids
            .insert(id, name)
            .map_err(|e| format_error(path, e.to_string()))?;
    }
    Ok(ModelBundle {
        model: RelationModel::new(table, doc.priors).map_err(|e| format_error(path, e.to_string()))?,
        category_ids,
    })
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_text(path, &model_to_json(bundle)?)
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    parse_model(&read_text(path)?, path)
}

/// File locations of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    pub annotations: PathBuf,
    pub detections: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            annotations: dir.join("annotations.json"),
            detections: dir.join("detections.json"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_converts_to_center() {
        let map = CategoryMap::from_names(["a"]);
        let text = r#"[{"image_id": 3, "category_id": 1, "bbox": [0, 0, 10, 20], "score": 0.5}]"#;
        let d = parse_detections(text, &map, Path::new("x.json")).unwrap();
        assert_eq!(d[0].placement.center, [5.0, 10.0]);
        assert_eq!(d[0].placement.height, 20.0);
        assert_eq!(d[0].placement.width, 10.0);
        assert_eq!(d[0].id, 0);
        assert!(parse_detections("[]", &map, Path::new("x")).unwrap().is_empty());
    }

    #[test]
    fn bad_records_are_named() {
        let map = CategoryMap::from_names(["a"]);
        let text = r#"[{"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5},
                      {"image_id": 1, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 1.5}]"#;
        let e = parse_detections(text, &map, Path::new("d.json"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("d.json") && e.contains("record 1"), "{e}");
        let text = r#"[{"image_id": 1, "category_id": 9, "bbox": [0, 0, 1, 1], "score": 0.5}]"#;
        let e = parse_detections(text, &map, Path::new("d.json"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("unknown category id 9"), "{e}");
    }

    #[test]
    fn annotations_resolve_references() {
        let text = r#"{"images": [{"id": 1, "width": 100, "height": 100}],
                       "categories": [{"id": 4, "name": "cup"}],
                       "annotations": [{"image_id": 1, "category_id": 4, "bbox": [95, 0, 10, 10]},
                                       {"image_id": 1, "category_id": 4, "bbox": [0, 0, 10, 10], "iscrowd": 0}]}"#;
        let set = parse_annotations(text, Path::new("a.json")).unwrap();
        assert_eq!(set.scenes[0].objects.len(), 2);
        assert_eq!(set.warnings.len(), 1);
        let broken = text.replace(
            r#""image_id": 1, "category_id": 4, "bbox": [0"#,
            r#""image_id": 2, "category_id": 4, "bbox": [0"#,
        );
        assert!(parse_annotations(&broken, Path::new("a.json")).is_err());
    }

    #[test]
    fn canonical_json_sorts_keys() {
        let mut m = BTreeMap::new();
        m.insert("b", 1.0 / 3.0);
        m.insert("a", 2.0);
        let s = to_canonical_json(&m).unwrap();
        assert_eq!(s, "{\n  \"a\": 2.0,\n  \"b\": 0.3333333333333333\n}\n");
    }
}
