//! Detection annotations: boxes, scenes, the dense category table and the
//! parent hierarchy used when sampling confusing categories.
//!
//! Category ids are always *dense*: `1..=C`, with `0` reserved for
//! background. The original ids of the source document are kept in the
//! table for reporting and for writing the document back out.

mod coco;
mod hierarchy;

pub use coco::{
    load_dataset, load_dataset_from_str, original_id_map, to_coco_json, Dataset, LoadReport,
};
pub use hierarchy::{load_hierarchy, parse_hierarchy, Hierarchy};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

/// Index of the background class in every score vector.
pub const BACKGROUND: usize = 0;

#[derive(Debug, thiserror::Error)]
pub enum AnnotationError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed annotation document at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("unknown category id {0}")]
    UnknownCategory(usize),
}

pub type Result<T> = std::result::Result<T, AnnotationError>;

/// An axis-aligned box in pixel coordinates with its dense category id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub category_id: usize,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, category_id: usize) -> Self {
        Self {
            x,
            y,
            w,
            h,
            category_id,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn with_category(mut self, category_id: usize) -> Self {
        self.category_id = category_id;
        self
    }
}

/// One image and its ground-truth boxes, in on-disk annotation order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAnnotation {
    pub image_id: i64,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BoundingBox>,
}

impl SceneAnnotation {
    pub fn new(image_id: i64, width: u32, height: u32) -> Self {
        Self {
            image_id,
            width,
            height,
            boxes: Vec::new(),
        }
    }

    pub fn with_boxes(mut self, boxes: Vec<BoundingBox>) -> Self {
        self.boxes = boxes;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub plural: String,
    pub original_id: i64,
}

/// Dense category table. Entry `k` holds category id `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryTable {
    entries: Vec<Category>,
}

impl CategoryTable {
    /// Builds a table from `(name, plural)` pairs; ids are assigned `1..=C` in
    /// order and double as the original ids.
    pub fn from_names<S: AsRef<str>>(names: &[(S, Option<S>)]) -> Self {
        let entries = names
            .iter()
            .enumerate()
            .map(|(k, (name, plural))| Category {
                name: name.as_ref().to_string(),
                plural: plural
                    .as_ref()
                    .map(|p| p.as_ref().to_string())
                    .unwrap_or_else(|| pluralize(name.as_ref())),
                original_id: k as i64 + 1,
            })
            .collect();
        Self { entries }
    }

    pub(crate) fn from_entries(entries: Vec<Category>) -> Self {
        Self { entries }
    }

    /// Number of foreground categories, `C`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Category> {
        if id == BACKGROUND {
            return None;
        }
        self.entries.get(id - 1)
    }

    pub fn category(&self, id: usize) -> Result<&Category> {
        self.get(id).ok_or(AnnotationError::UnknownCategory(id))
    }

    pub fn name(&self, id: usize) -> Result<&str> {
        self.category(id).map(|c| c.name.as_str())
    }

    pub fn plural(&self, id: usize) -> Result<&str> {
        self.category(id).map(|c| c.plural.as_str())
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|c| c.name == name).map(|k| k + 1)
    }

    pub fn original_id(&self, id: usize) -> Option<i64> {
        self.get(id).map(|c| c.original_id)
    }

    /// Dense ids `1..=C`.
    pub fn ids(&self) -> impl Iterator<Item = usize> {
        1..=self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Category)> {
        self.entries.iter().enumerate().map(|(k, c)| (k + 1, c))
    }
}

const IRREGULAR_PLURALS: [(&str, &str); 14] = [
    ("person", "people"),
    ("child", "children"),
    ("man", "men"),
    ("woman", "women"),
    ("mouse", "mice"),
    ("goose", "geese"),
    ("foot", "feet"),
    ("tooth", "teeth"),
    ("wolf", "wolves"),
    ("knife", "knives"),
    ("leaf", "leaves"),
    ("shelf", "shelves"),
    ("sheep", "sheep"),
    ("scissors", "scissors"),
];

/// English plural used when the category document gives none. Only the last
/// word of a multi-word name changes.
pub fn pluralize(name: &str) -> String {
    let (head, last) = match name.rfind(' ') {
        Some(k) => name.split_at(k + 1),
        None => ("", name),
    };
    let lower = last.to_lowercase();
    let plural = if let Some((_, p)) = IRREGULAR_PLURALS.iter().find(|(s, _)| *s == lower) {
        p.to_string()
    } else if lower.ends_with("skis") {
        last.to_string()
    } else if ["s", "x", "z", "ch", "sh"].iter().any(|e| lower.ends_with(e)) {
        format!("{last}es")
    } else if lower.ends_with('y')
        && !lower[..lower.len() - 1].ends_with(['a', 'e', 'i', 'o', 'u'])
        && lower.len() > 1
    {
        format!("{}ies", &last[..last.len() - 1])
    } else {
        format!("{last}s")
    };
    format!("{head}{plural}")
}
