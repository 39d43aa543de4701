//! Detection-failure analysis and hard-negative description synthesis.
//!
//! A foreground prediction is a false negative when its ground-truth class
//! does not reach the maximum of its score vector; a background prediction
//! is a false positive when the background score does not. Hard negatives
//! are built by editing the scene's object list and re-rendering with the
//! anchor's template and order seed, in priority order: remove fully missed
//! objects, insert false positives, then swap an object's category for a
//! sibling under the same hierarchy parent.

use crate::annotations::{BoundingBox, Hierarchy, SceneAnnotation, BACKGROUND};
use crate::prompting::{Description, PromptError, Renderer};
use crate::seeds;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Default number of hard negatives per image.
pub const DEFAULT_NUM_NEGATIVES: usize = 5;

const MAX_CONFUSE_ATTEMPTS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum NegativeError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("scene has no boxes and only {available} false positive(s); cannot build {requested} negatives")]
    EmptyScene { available: usize, requested: usize },
    #[error("no alternative category exists for confusion")]
    NoAlternative,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("score file line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, NegativeError>;

/// A classifier output for one prediction, with its assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPrediction {
    /// `C + 1` non-negative scores, index 0 is background.
    pub score: Vec<f64>,
    /// Ground-truth label of the prediction, 0 for background.
    pub assigned_label: usize,
    pub bbox: BoundingBox,
    pub matched_object: Option<usize>,
}

impl ScoredPrediction {
    /// Index of the maximum score; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.score)
    }

    /// `max(score) - score[assigned_label]`.
    pub fn gap(&self) -> f64 {
        self.score[self.argmax()] - self.score[self.assigned_label]
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalseNegative {
    pub object: usize,
    /// Smallest gap among the object's predictions.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FalsePositive {
    pub bbox: BoundingBox,
    pub category: usize,
    pub gap: f64,
}

/// Failures of one image, each tier ordered by descending score gap.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FailureSet {
    pub false_negatives: Vec<FalseNegative>,
    pub false_positives: Vec<FalsePositive>,
}

impl FailureSet {
    pub fn false_negative_objects(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.false_negatives.iter().map(|f| f.object).collect();
        v.sort_unstable();
        v
    }

    pub fn is_empty(&self) -> bool {
        self.false_negatives.is_empty() && self.false_positives.is_empty()
    }
}

/// Classifies every prediction and aggregates false negatives per object.
///
/// An object is reported only when *all* predictions matched to it are false
/// negatives. False positives are recorded with their argmax category and
/// deduplicated on `(box, category)`.
pub fn detect_failures(predictions: &[ScoredPrediction]) -> Result<FailureSet> {
    let width = predictions.first().map(|p| p.score.len()).unwrap_or(0);
    // object -> (all predictions missed, smallest gap)
    let mut per_object: BTreeMap<usize, (bool, f64)> = BTreeMap::new();
    let mut fps: Vec<FalsePositive> = Vec::new();

    for (k, p) in predictions.iter().enumerate() {
        if p.score.len() != width || width < 2 {
            return Err(NegativeError::Contract(format!(
                "prediction {k}: score has {} entries, expected {width} (at least 2)",
                p.score.len()
            )));
        }
        if p.score.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(NegativeError::Contract(format!(
                "prediction {k}: scores must be finite and non-negative"
            )));
        }
        if p.assigned_label >= width {
            return Err(NegativeError::Contract(format!(
                "prediction {k}: label {} outside the score vector",
                p.assigned_label
            )));
        }
        let best = p.argmax();
        let missed = p.score[p.assigned_label] < p.score[best];
        if p.assigned_label == BACKGROUND {
            if missed {
                let fp = FalsePositive {
                    bbox: p.bbox.with_category(best),
                    category: best,
                    gap: p.gap(),
                };
                match fps.iter_mut().find(|f| f.bbox == fp.bbox && f.category == fp.category) {
                    Some(existing) => existing.gap = existing.gap.max(fp.gap),
                    None => fps.push(fp),
                }
            }
        } else {
            let object = p.matched_object.ok_or_else(|| {
                NegativeError::Contract(format!(
                    "prediction {k}: foreground prediction without a matched object"
                ))
            })?;
            let entry = per_object.entry(object).or_insert((true, f64::INFINITY));
            entry.0 &= missed;
            entry.1 = entry.1.min(p.gap());
        }
    }

    let mut false_negatives: Vec<FalseNegative> = per_object
        .into_iter()
        .filter(|(_, (all_missed, _))| *all_missed)
        .map(|(object, (_, gap))| FalseNegative { object, gap })
        .collect();
    false_negatives.sort_by(|a, b| b.gap.total_cmp(&a.gap).then(a.object.cmp(&b.object)));
    // stable: equal gaps keep first-seen order
    fps.sort_by(|a, b| b.gap.total_cmp(&a.gap));
    Ok(FailureSet {
        false_negatives,
        false_positives: fps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeKind {
    RemoveFn,
    InsertFp,
    ConfuseCategory,
}

impl NegativeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NegativeKind::RemoveFn => "remove_fn",
            NegativeKind::InsertFp => "insert_fp",
            NegativeKind::ConfuseCategory => "confuse_category",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardNegativeSet {
    pub negatives: Vec<Description>,
    pub kinds: Vec<NegativeKind>,
}

impl HardNegativeSet {
    pub fn len(&self) -> usize {
        self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NegativeKind, &Description)> {
        self.kinds.iter().copied().zip(self.negatives.iter())
    }

    pub fn to_records(&self, image_id: i64) -> Vec<NegativeRecord> {
        self.iter()
            .map(|(kind, d)| NegativeRecord {
                image_id,
                kind,
                text: d.text.clone(),
            })
            .collect()
    }
}

/// Line-delimited export form of one hard negative.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeRecord {
    pub image_id: i64,
    pub kind: NegativeKind,
    pub text: String,
}

/// Draws a replacement for `category`: a uniform same-parent sibling, or a
/// uniform different category when the parent has no other child.
pub fn sample_confusing_category(
    category: usize,
    hierarchy: &Hierarchy,
    num_categories: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let siblings = hierarchy.siblings(category);
    if !siblings.is_empty() {
        return Some(siblings[rng.random_range(0..siblings.len())]);
    }
    if num_categories < 2 {
        return None;
    }
    // uniform over 1..=C without `category`
    let k = rng.random_range(1..num_categories);
    Some(if k >= category { k + 1 } else { k })
}

/// Builds exactly `n_h` hard negatives for `scene`.
///
/// `anchor` must have been rendered from `scene`; its template and order
/// seed are reused so untouched clauses keep their text and relative order.
pub fn build_negative_set(
    scene: &SceneAnnotation,
    anchor: &Description,
    failures: &FailureSet,
    hierarchy: &Hierarchy,
    renderer: &Renderer<'_>,
    n_h: usize,
    rng_seed: u64,
) -> Result<HardNegativeSet> {
    if n_h == 0 {
        return Err(NegativeError::Contract("n_h must be at least 1".into()));
    }
    let template = renderer.template(&anchor.template_id)?;
    let render = |boxes: Vec<BoundingBox>| -> Result<Description> {
        let edited = SceneAnnotation {
            boxes,
            ..scene.clone()
        };
        Ok(renderer.render_with(&edited, template, anchor.order_seed)?)
    };
    let mut out = HardNegativeSet {
        negatives: Vec::with_capacity(n_h),
        kinds: Vec::with_capacity(n_h),
    };
    let push = |out: &mut HardNegativeSet, d: Description, kind| {
        if d.text != anchor.text && out.len() < n_h {
            out.negatives.push(d);
            out.kinds.push(kind);
        }
    };

    for fnv in &failures.false_negatives {
        if out.len() >= n_h {
            break;
        }
        if fnv.object >= scene.boxes.len() {
            return Err(NegativeError::Contract(format!(
                "false negative object {} outside the scene ({} boxes)",
                fnv.object,
                scene.boxes.len()
            )));
        }
        let mut boxes = scene.boxes.clone();
        boxes.remove(fnv.object);
        push(&mut out, render(boxes)?, NegativeKind::RemoveFn);
    }

    let num_categories = renderer.table().len();
    for fp in &failures.false_positives {
        if out.len() >= n_h {
            break;
        }
        if fp.category == BACKGROUND || fp.category > num_categories {
            return Err(NegativeError::Contract(format!(
                "false positive category {} outside 1..={num_categories}",
                fp.category
            )));
        }
        let mut boxes = scene.boxes.clone();
        boxes.push(fp.bbox.with_category(fp.category));
        push(&mut out, render(boxes)?, NegativeKind::InsertFp);
    }

    if out.len() < n_h && scene.boxes.is_empty() {
        return Err(NegativeError::EmptyScene {
            available: out.len(),
            requested: n_h,
        });
    }
    let mut rng = seeds::rng(rng_seed);
    let mut attempts = 0;
    while out.len() < n_h {
        let object = rng.random_range(0..scene.boxes.len());
        let original = scene.boxes[object].category_id;
        let replacement =
            sample_confusing_category(original, hierarchy, num_categories, &mut rng)
                .ok_or(NegativeError::NoAlternative)?;
        let mut boxes = scene.boxes.clone();
        boxes[object].category_id = replacement;
        let d = render(boxes)?;
        if d.text == anchor.text {
            attempts += 1;
            if attempts >= MAX_CONFUSE_ATTEMPTS {
                return Err(NegativeError::NoAlternative);
            }
            continue;
        }
        push(&mut out, d, NegativeKind::ConfuseCategory);
    }
    Ok(out)
}

/// One prediction of the external score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    /// `[x, y, w, h]` in pixels.
    pub bbox: [f64; 4],
    /// Dense label, 0 for background.
    pub assigned_label: usize,
    #[serde(default)]
    pub matched_object: Option<usize>,
    pub scores: Vec<f64>,
}

/// One line of the external score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub image_id: i64,
    pub predictions: Vec<PredictionRecord>,
}

impl ScoreRecord {
    pub fn to_predictions(&self) -> Vec<ScoredPrediction> {
        self.predictions
            .iter()
            .map(|p| ScoredPrediction {
                score: p.scores.clone(),
                assigned_label: p.assigned_label,
                bbox: BoundingBox::new(p.bbox[0], p.bbox[1], p.bbox[2], p.bbox[3], p.assigned_label),
                matched_object: p.matched_object,
            })
            .collect()
    }
}

/// Parses a line-delimited score file.
pub fn parse_scores(text: &str) -> Result<Vec<ScoreRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| NegativeError::Parse {
                line: k + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| NegativeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scores(&text)
}
