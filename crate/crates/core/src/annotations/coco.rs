use super::{AnnotationError, BoundingBox, Category, CategoryTable, Result, SceneAnnotation};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

/// A loaded detection dataset. Immutable after load.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub scenes: Vec<SceneAnnotation>,
    pub categories: CategoryTable,
}

impl Dataset {
    pub fn scene(&self, image_id: i64) -> Option<&SceneAnnotation> {
        self.scenes.iter().find(|s| s.image_id == image_id)
    }
}

/// Non-fatal events encountered while loading.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Boxes that overflowed the image and were clamped.
    pub clamped: usize,
    /// Crowd annotations dropped from the scenes.
    pub crowd_skipped: usize,
}

#[derive(Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize, Serialize)]
struct CocoImage {
    id: i64,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Deserialize, Serialize)]
struct CocoAnnotation {
    id: i64,
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    iscrowd: CrowdFlag,
}

#[derive(Deserialize, Serialize, Default, Clone, Copy)]
#[serde(untagged)]
enum CrowdFlag {
    Int(i64),
    Bool(bool),
    #[default]
    #[serde(skip)]
    Absent,
}

impl CrowdFlag {
    fn is_crowd(self) -> bool {
        match self {
            CrowdFlag::Int(v) => v != 0,
            CrowdFlag::Bool(v) => v,
            CrowdFlag::Absent => false,
        }
    }
}

#[derive(Deserialize, Serialize)]
struct CocoCategory {
    id: i64,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    plural: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    supercategory: Option<String>,
}

/// Reads a COCO-style detection document from disk.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<(Dataset, LoadReport)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    load_dataset_from_str(&text)
}

/// Parses and validates a COCO-style detection document.
///
/// Boxes overflowing the image are clamped; crowd annotations are dropped.
/// Categories are re-indexed densely in ascending original-id order.
pub fn load_dataset_from_str(text: &str) -> Result<(Dataset, LoadReport)> {
    let doc: CocoDocument = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
    let mut problems = Vec::new();
    let mut report = LoadReport::default();

    let mut cats: Vec<&CocoCategory> = doc.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let mut dense: HashMap<i64, usize> = HashMap::new();
    let mut names = HashSet::new();
    for (k, c) in cats.iter().enumerate() {
        if dense.insert(c.id, k + 1).is_some() {
            problems.push(format!("category {}: duplicate id", c.id));
        }
        if c.name.trim().is_empty() {
            problems.push(format!("category {}: empty name", c.id));
        } else if !names.insert(c.name.as_str()) {
            problems.push(format!("category {}: duplicate name {:?}", c.id, c.name));
        }
    }
    let table = CategoryTable::from_entries(
        cats.iter()
            .map(|c| Category {
                name: c.name.clone(),
                plural: c.plural.clone().unwrap_or_else(|| super::pluralize(&c.name)),
                original_id: c.id,
            })
            .collect(),
    );

    let mut scenes: Vec<SceneAnnotation> = Vec::with_capacity(doc.images.len());
    let mut scene_index: HashMap<i64, usize> = HashMap::new();
    for img in &doc.images {
        if img.width == 0 || img.height == 0 {
            problems.push(format!("image {}: non-positive dimensions", img.id));
        }
        if scene_index.insert(img.id, scenes.len()).is_some() {
            problems.push(format!("image {}: duplicate id", img.id));
            continue;
        }
        scenes.push(SceneAnnotation::new(img.id, img.width, img.height));
    }

    for ann in &doc.annotations {
        let Some(&si) = scene_index.get(&ann.image_id) else {
            problems.push(format!(
                "annotation {}: unknown image_id {}",
                ann.id, ann.image_id
            ));
            continue;
        };
        let Some(&category_id) = dense.get(&ann.category_id) else {
            problems.push(format!(
                "annotation {}: unknown category_id {}",
                ann.id, ann.category_id
            ));
            continue;
        };
        if ann.iscrowd.is_crowd() {
            report.crowd_skipped += 1;
            continue;
        }
        let [x, y, w, h] = ann.bbox;
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            problems.push(format!(
                "annotation {}: invalid box size (w={w}, h={h})",
                ann.id
            ));
            continue;
        }
        let scene = &mut scenes[si];
        let (width, height) = (scene.width as f64, scene.height as f64);
        let x0 = x.max(0.0);
        let y0 = y.max(0.0);
        let x1 = (x + w).min(width);
        let y1 = (y + h).min(height);
        if x1 <= x0 || y1 <= y0 {
            problems.push(format!("annotation {}: box lies outside the image", ann.id));
            continue;
        }
        let bbox = if x0 != x || y0 != y || x1 != x + w || y1 != y + h {
            report.clamped += 1;
            BoundingBox::new(x0, y0, x1 - x0, y1 - y0, category_id)
        } else {
            // untouched boxes keep their exact values
            BoundingBox::new(x, y, w, h, category_id)
        };
        scene.boxes.push(bbox);
    }

    if !problems.is_empty() {
        return Err(AnnotationError::Validation(problems));
    }
    Ok((
        Dataset {
            scenes,
            categories: table,
        },
        report,
    ))
}

fn parse_error(text: &str, err: &serde_json::Error) -> AnnotationError {
    let (line, column) = (err.line(), err.column());
    let offset = if line == 0 {
        0
    } else {
        let preceding: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
        (preceding + column.saturating_sub(1)).min(text.len())
    };
    AnnotationError::Parse {
        offset,
        line,
        column,
        message: err.to_string(),
    }
}

#[derive(Serialize)]
struct CocoOut {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

/// Serializes a dataset back into the COCO interchange layout using the
/// original category ids. Annotation ids are assigned sequentially.
pub fn to_coco_json(dataset: &Dataset) -> String {
    let images = dataset
        .scenes
        .iter()
        .map(|s| CocoImage {
            id: s.image_id,
            width: s.width,
            height: s.height,
            file_name: None,
        })
        .collect();
    let mut annotations = Vec::new();
    for s in &dataset.scenes {
        for b in &s.boxes {
            annotations.push(CocoAnnotation {
                id: annotations.len() as i64 + 1,
                image_id: s.image_id,
                category_id: dataset.categories.original_id(b.category_id).unwrap_or(0),
                bbox: [b.x, b.y, b.w, b.h],
                iscrowd: CrowdFlag::Int(0),
            });
        }
    }
    let categories = dataset
        .categories
        .iter()
        .map(|(_, c)| CocoCategory {
            id: c.original_id,
            name: c.name.clone(),
            plural: Some(c.plural.clone()),
            supercategory: None,
        })
        .collect();
    let out = CocoOut {
        images,
        annotations,
        categories,
    };
    serde_json::to_string_pretty(&out).expect("dataset serialization is infallible")
}

/// Original → dense category id map, for reporting.
pub fn original_id_map(table: &CategoryTable) -> BTreeMap<i64, usize> {
    table.iter().map(|(id, c)| (c.original_id, id)).collect()
}
