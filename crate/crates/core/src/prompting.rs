//! Prompt templates and description rendering.
//!
//! An image-level description is built by grouping the scene's boxes by
//! category, filling the template's group pattern once per category
//! (`{QUANTITY}` is the group size) and, when the template has a clause
//! pattern, one clause per instance carrying its `{POSITION}` and `{SIZE}`.
//!
//! Patterns use `{SLOT}` placeholders plus `{singular|plural}` agreement
//! choices resolved against the group size, e.g.
//! `There {is|are} {QUANTITY} {CATEGORY}`.
//!
//! Group and instance order is a keyed permutation of the order seed: each
//! group and each box gets a key mixed from the seed and its own identity
//! (category id, box geometry). Editing the object list therefore leaves the
//! relative order of the untouched objects intact.

use crate::annotations::{BoundingBox, CategoryTable, SceneAnnotation};
use crate::seeds;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Rendered text for a scene without boxes.
pub const EMPTY_SCENE_TEXT: &str = "There is nothing in the image.";

/// Built-in template file, covering the three canonical slot subsets.
pub const BUILTIN_TEMPLATES: &str = include_str!("../data/templates.tsv");

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("no prompt templates supplied")]
    NoTemplates,
    #[error("category id {0} is missing from the category table")]
    UnknownCategory(usize),
    #[error("template {id:?}: {message}")]
    InvalidTemplate { id: String, message: String },
    #[error("template file line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Category,
    Quantity,
    Position,
    Size,
}

impl Slot {
    pub fn as_str(self) -> &'static str {
        match self {
            Slot::Category => "CATEGORY",
            Slot::Quantity => "QUANTITY",
            Slot::Position => "POSITION",
            Slot::Size => "SIZE",
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Slot {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "CATEGORY" => Ok(Slot::Category),
            "QUANTITY" => Ok(Slot::Quantity),
            "POSITION" => Ok(Slot::Position),
            "SIZE" => Ok(Slot::Size),
            other => Err(format!("unknown slot {other:?}")),
        }
    }
}

/// Canonical template subsets, one per slot-ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemplateSet {
    /// CATEGORY + QUANTITY.
    Cq,
    /// Adds POSITION.
    Cqp,
    /// Adds SIZE.
    Cqps,
}

impl TemplateSet {
    fn allowed(self) -> &'static [Slot] {
        match self {
            TemplateSet::Cq => &[Slot::Category, Slot::Quantity],
            TemplateSet::Cqp => &[Slot::Category, Slot::Quantity, Slot::Position],
            TemplateSet::Cqps => &[Slot::Category, Slot::Quantity, Slot::Position, Slot::Size],
        }
    }

    /// Built-in templates whose slots fit within this set.
    pub fn templates(self) -> Vec<PromptTemplate> {
        let allowed = self.allowed();
        builtin_templates()
            .into_iter()
            .filter(|t| t.slots.iter().all(|s| allowed.contains(s)))
            .collect()
    }
}

pub fn builtin_templates() -> Vec<PromptTemplate> {
    parse_templates(BUILTIN_TEMPLATES).expect("built-in templates are valid")
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(Slot),
    Agree { one: String, many: String },
}

fn parse_pattern(id: &str, pattern: &str) -> Result<Vec<Segment>> {
    let invalid = |message: String| PromptError::InvalidTemplate {
        id: id.to_string(),
        message,
    };
    let mut segments = Vec::new();
    let mut rest = pattern;
    while let Some(open) = rest.find('{') {
        if open > 0 {
            segments.push(Segment::Text(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find('}')
            .map(|c| c + open)
            .ok_or_else(|| invalid(format!("unclosed '{{' in {pattern:?}")))?;
        let inner = &rest[open + 1..close];
        if let Some((one, many)) = inner.split_once('|') {
            segments.push(Segment::Agree {
                one: one.to_string(),
                many: many.to_string(),
            });
        } else {
            segments.push(Segment::Slot(inner.parse().map_err(invalid)?));
        }
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(invalid(format!("stray '}}' in {pattern:?}")));
    }
    if !rest.is_empty() {
        segments.push(Segment::Text(rest.to_string()));
    }
    Ok(segments)
}

fn placeholders(segments: &[Segment]) -> BTreeSet<Slot> {
    segments
        .iter()
        .filter_map(|s| match s {
            Segment::Slot(slot) => Some(*slot),
            _ => None,
        })
        .collect()
}

/// A prompt with a per-category group pattern and an optional per-instance
/// clause pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub id: String,
    pub slots: BTreeSet<Slot>,
    pub group_pattern: String,
    pub clause_pattern: String,
    /// Between the group head and its first clause.
    pub list_intro: String,
    /// Between consecutive clauses of one group.
    pub clause_joiner: String,
    /// Between group sentences.
    pub group_joiner: String,
    /// Closes every group sentence.
    pub terminator: String,
    group: Vec<Segment>,
    clause: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(
        id: impl Into<String>,
        slots: impl IntoIterator<Item = Slot>,
        group_pattern: impl Into<String>,
        clause_pattern: impl Into<String>,
    ) -> Result<Self> {
        let id = id.into();
        let slots: BTreeSet<Slot> = slots.into_iter().collect();
        let group_pattern = group_pattern.into();
        let clause_pattern = clause_pattern.into();
        let invalid = |message: &str| PromptError::InvalidTemplate {
            id: id.clone(),
            message: message.to_string(),
        };
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(invalid("id must be non-empty without whitespace"));
        }
        let group = parse_pattern(&id, &group_pattern)?;
        let clause = parse_pattern(&id, &clause_pattern)?;
        let in_group = placeholders(&group);
        let in_clause = placeholders(&clause);

        if !in_group.contains(&Slot::Category) {
            return Err(invalid("group pattern must contain {CATEGORY}"));
        }
        if in_group.contains(&Slot::Position) || in_group.contains(&Slot::Size) {
            return Err(invalid("{POSITION} and {SIZE} belong in the clause pattern"));
        }
        if in_clause.contains(&Slot::Quantity) {
            return Err(invalid("{QUANTITY} belongs in the group pattern"));
        }
        let instance_slots = [Slot::Position, Slot::Size];
        let wants_clause = instance_slots.iter().any(|s| slots.contains(s));
        if clause_pattern.is_empty() == wants_clause {
            return Err(invalid(
                "clause pattern must be present exactly when POSITION or SIZE is declared",
            ));
        }
        for s in in_group.iter().chain(in_clause.iter()) {
            if !slots.contains(s) && !matches!(s, Slot::Category | Slot::Quantity) {
                return Err(invalid(&format!("placeholder {{{s}}} is not a declared slot")));
            }
        }
        for s in instance_slots {
            if slots.contains(&s) && !in_clause.contains(&s) {
                return Err(invalid(&format!("declared slot {s} never appears")));
            }
        }
        Ok(Self {
            id,
            slots,
            group_pattern,
            clause_pattern,
            list_intro: ": ".to_string(),
            clause_joiner: ", ".to_string(),
            group_joiner: " ".to_string(),
            terminator: ".".to_string(),
            group,
            clause,
        })
    }

    pub fn has_clauses(&self) -> bool {
        !self.clause.is_empty()
    }

    /// One line of the template file format.
    pub fn to_line(&self) -> String {
        let slots: Vec<&str> = self.slots.iter().map(|s| s.as_str()).collect();
        format!(
            "{}\t{}\t{}\t{}",
            self.id,
            slots.join(","),
            self.group_pattern,
            self.clause_pattern
        )
    }
}

/// Parses `id<TAB>slots<TAB>group_pattern<TAB>clause_pattern` lines. The
/// clause column may be empty or absent; `#` lines are comments.
pub fn parse_templates(text: &str) -> Result<Vec<PromptTemplate>> {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        let lineno = k + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 3 || cols.len() > 4 {
            return Err(PromptError::Syntax {
                line: lineno,
                message: format!("expected 3 or 4 tab-separated fields, found {}", cols.len()),
            });
        }
        let slots = cols[1]
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(Slot::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|message| PromptError::Syntax {
                line: lineno,
                message,
            })?;
        let template = PromptTemplate::new(cols[0], slots, cols[2], cols.get(3).copied().unwrap_or(""))?;
        if !ids.insert(template.id.clone()) {
            return Err(PromptError::Syntax {
                line: lineno,
                message: format!("duplicate template id {:?}", template.id),
            });
        }
        out.push(template);
    }
    if out.is_empty() {
        return Err(PromptError::NoTemplates);
    }
    Ok(out)
}

pub fn load_templates(path: impl AsRef<Path>) -> Result<Vec<PromptTemplate>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_templates(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PositionLabel {
    TopLeft,
    Top,
    TopRight,
    Left,
    Center,
    Right,
    BottomLeft,
    Bottom,
    BottomRight,
}

impl PositionLabel {
    pub const ALL: [PositionLabel; 9] = [
        PositionLabel::TopLeft,
        PositionLabel::Top,
        PositionLabel::TopRight,
        PositionLabel::Left,
        PositionLabel::Center,
        PositionLabel::Right,
        PositionLabel::BottomLeft,
        PositionLabel::Bottom,
        PositionLabel::BottomRight,
    ];

    /// Row-major cell, `row, col` in `0..3`.
    pub fn from_cell(row: usize, col: usize) -> Self {
        Self::ALL[row * 3 + col]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PositionLabel::TopLeft => "top left",
            PositionLabel::Top => "top",
            PositionLabel::TopRight => "top right",
            PositionLabel::Left => "left",
            PositionLabel::Center => "center",
            PositionLabel::Right => "right",
            PositionLabel::BottomLeft => "bottom left",
            PositionLabel::Bottom => "bottom",
            PositionLabel::BottomRight => "bottom right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SizeLabel {
    Small,
    Medium,
    Large,
}

impl SizeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeLabel::Small => "small",
            SizeLabel::Medium => "medium",
            SizeLabel::Large => "large",
        }
    }
}

/// Size class boundaries. `small` if below the first, `large` from the
/// second on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SizeThresholds {
    /// Fractions of the image area.
    AreaFraction { small: f64, medium: f64 },
    /// Absolute pixel areas (COCO uses 32² and 96²).
    AbsoluteArea { small: f64, medium: f64 },
}

impl SizeThresholds {
    pub const COCO: SizeThresholds = SizeThresholds::AbsoluteArea {
        small: 32.0 * 32.0,
        medium: 96.0 * 96.0,
    };
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds::AreaFraction {
            small: 0.01,
            medium: 0.10,
        }
    }
}

/// Assigns the box center to a cell of the 3×3 grid. Centers on a grid line
/// belong to the left/top cell.
pub fn position_bin(b: &BoundingBox, width: u32, height: u32) -> PositionLabel {
    let (cx, cy) = b.center();
    let cell = |v: f64, extent: f64| {
        if v <= extent / 3.0 {
            0
        } else if v <= 2.0 * extent / 3.0 {
            1
        } else {
            2
        }
    };
    PositionLabel::from_cell(cell(cy, height as f64), cell(cx, width as f64))
}

pub fn size_class(b: &BoundingBox, width: u32, height: u32) -> SizeLabel {
    size_class_with(b, width, height, &SizeThresholds::default())
}

pub fn size_class_with(
    b: &BoundingBox,
    width: u32,
    height: u32,
    thresholds: &SizeThresholds,
) -> SizeLabel {
    let (value, small, medium) = match *thresholds {
        SizeThresholds::AreaFraction { small, medium } => {
            (b.area() / (width as f64 * height as f64), small, medium)
        }
        SizeThresholds::AbsoluteArea { small, medium } => (b.area(), small, medium),
    };
    if value < small {
        SizeLabel::Small
    } else if value < medium {
        SizeLabel::Medium
    } else {
        SizeLabel::Large
    }
}

/// Number word for `n`: "one".."ten", then decimal numerals.
///
/// Panics when `n == 0`; empty groups are never rendered.
pub fn quantity_word(n: usize) -> String {
    const WORDS: [&str; 10] = [
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];
    assert!(n >= 1, "quantity_word called with an empty group");
    match WORDS.get(n - 1) {
        Some(w) => (*w).to_string(),
        None => n.to_string(),
    }
}

/// What a text span refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpanTarget {
    /// A group sentence head, with the object indices it counts.
    Group {
        category_id: usize,
        members: Vec<usize>,
    },
    /// One instance clause.
    Object { index: usize },
    /// The category name in an object-level description.
    Category { category_id: usize },
}

/// Character range `[start, end)` of the description text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    #[serde(flatten)]
    pub target: SpanTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Description {
    pub text: String,
    pub template_id: String,
    pub order_seed: u64,
    pub spans: Vec<Span>,
}

impl Description {
    /// Text covered by a character range.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end - start).collect()
    }

    pub fn clause_text(&self, object: usize) -> Option<String> {
        self.spans
            .iter()
            .find(|s| s.target == SpanTarget::Object { index: object })
            .map(|s| self.slice(s.start, s.end))
    }

    /// Object indices counted by the group spans, ascending.
    pub fn referenced_objects(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .spans
            .iter()
            .filter_map(|s| match &s.target {
                SpanTarget::Group { members, .. } => Some(members.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect();
        out.sort_unstable();
        out
    }

    /// Object indices with their own clause, ascending.
    pub fn clause_objects(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .spans
            .iter()
            .filter_map(|s| match s.target {
                SpanTarget::Object { index } => Some(index),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out
    }

    pub fn to_record(&self, image_id: i64) -> DescriptionRecord {
        DescriptionRecord {
            image_id,
            template_id: self.template_id.clone(),
            seed: self.order_seed,
            text: self.text.clone(),
            spans: self.spans.clone(),
        }
    }
}

/// Line-delimited export form of a description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub image_id: i64,
    pub template_id: String,
    pub seed: u64,
    pub text: String,
    pub spans: Vec<Span>,
}

/// Text builder tracking character offsets.
#[derive(Default)]
struct TextBuilder {
    text: String,
    chars: usize,
    spans: Vec<Span>,
}

impl TextBuilder {
    fn push(&mut self, s: &str) {
        self.text.push_str(s);
        self.chars += s.chars().count();
    }

    fn push_span(&mut self, s: &str, target: SpanTarget) {
        let start = self.chars;
        self.push(s);
        self.spans.push(Span {
            start,
            end: self.chars,
            target,
        });
    }
}

struct Fill<'a> {
    count: usize,
    name: &'a str,
    plural: &'a str,
    position: Option<PositionLabel>,
    size: Option<SizeLabel>,
}

fn fill(segments: &[Segment], f: &Fill<'_>) -> String {
    let mut out = String::new();
    let one = f.count == 1;
    for seg in segments {
        match seg {
            Segment::Text(t) => out.push_str(t),
            Segment::Agree { one: a, many: b } => out.push_str(if one { a } else { b }),
            Segment::Slot(Slot::Category) => out.push_str(if one { f.name } else { f.plural }),
            Segment::Slot(Slot::Quantity) => out.push_str(&quantity_word(f.count)),
            Segment::Slot(Slot::Position) => {
                out.push_str(f.position.map(PositionLabel::as_str).unwrap_or_default())
            }
            Segment::Slot(Slot::Size) => {
                out.push_str(f.size.map(SizeLabel::as_str).unwrap_or_default())
            }
        }
    }
    out
}

fn group_key(seed: u64, category_id: usize) -> u64 {
    seeds::mix(seed, category_id as u64)
}

fn instance_key(seed: u64, b: &BoundingBox) -> u64 {
    [b.x, b.y, b.w, b.h]
        .iter()
        .fold(seeds::mix(seed, 0x1a57_a4ce), |acc, v| seeds::mix(acc, v.to_bits()))
}

/// Renders descriptions from a fixed template list and category table.
#[derive(Debug, Clone)]
pub struct Renderer<'a> {
    templates: &'a [PromptTemplate],
    table: &'a CategoryTable,
    sizes: SizeThresholds,
}

impl<'a> Renderer<'a> {
    pub fn new(templates: &'a [PromptTemplate], table: &'a CategoryTable) -> Result<Self> {
        if templates.is_empty() {
            return Err(PromptError::NoTemplates);
        }
        Ok(Self {
            templates,
            table,
            sizes: SizeThresholds::default(),
        })
    }

    pub fn with_sizes(mut self, sizes: SizeThresholds) -> Self {
        self.sizes = sizes;
        self
    }

    pub fn table(&self) -> &'a CategoryTable {
        self.table
    }

    pub fn templates(&self) -> &'a [PromptTemplate] {
        self.templates
    }

    pub fn template(&self, id: &str) -> Result<&'a PromptTemplate> {
        self.templates
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    /// Picks a template uniformly with `seed`, then renders with it.
    pub fn describe(&self, scene: &SceneAnnotation, seed: u64) -> Result<Description> {
        let pick = seeds::rng(seed).random_range(0..self.templates.len());
        self.render_with(scene, &self.templates[pick], seed)
    }

    /// Renders `scene` with a given template and order seed.
    pub fn render_with(
        &self,
        scene: &SceneAnnotation,
        template: &PromptTemplate,
        seed: u64,
    ) -> Result<Description> {
        let mut out = TextBuilder::default();
        if scene.boxes.is_empty() {
            out.push(EMPTY_SCENE_TEXT);
        }

        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, b) in scene.boxes.iter().enumerate() {
            self.table
                .get(b.category_id)
                .ok_or(PromptError::UnknownCategory(b.category_id))?;
            groups.entry(b.category_id).or_default().push(i);
        }
        let mut groups: Vec<(usize, Vec<usize>)> = groups.into_iter().collect();
        groups.sort_by_key(|(c, _)| (group_key(seed, *c), *c));

        for (g, (category_id, mut members)) in groups.into_iter().enumerate() {
            members.sort_by_key(|&i| (instance_key(seed, &scene.boxes[i]), i));
            let cat = self.table.category(category_id).expect("checked above");
            if g > 0 {
                out.push(&template.group_joiner);
            }
            let head = fill(
                &template.group,
                &Fill {
                    count: members.len(),
                    name: &cat.name,
                    plural: &cat.plural,
                    position: None,
                    size: None,
                },
            );
            let clauses: Vec<(usize, String)> = if template.has_clauses() {
                members
                    .iter()
                    .map(|&i| {
                        let b = &scene.boxes[i];
                        let text = fill(
                            &template.clause,
                            &Fill {
                                count: 1,
                                name: &cat.name,
                                plural: &cat.plural,
                                position: Some(position_bin(b, scene.width, scene.height)),
                                size: Some(size_class_with(
                                    b,
                                    scene.width,
                                    scene.height,
                                    &self.sizes,
                                )),
                            },
                        );
                        (i, text)
                    })
                    .collect()
            } else {
                Vec::new()
            };
            out.push_span(
                &head,
                SpanTarget::Group {
                    category_id,
                    members: {
                        let mut m = members.clone();
                        m.sort_unstable();
                        m
                    },
                },
            );
            for (k, (i, text)) in clauses.iter().enumerate() {
                out.push(if k == 0 {
                    &template.list_intro
                } else {
                    &template.clause_joiner
                });
                out.push_span(text, SpanTarget::Object { index: *i });
            }
            out.push(&template.terminator);
        }

        Ok(Description {
            text: out.text,
            template_id: template.id.clone(),
            order_seed: seed,
            spans: out.spans,
        })
    }
}

/// Renders an image-level description with the default size thresholds.
pub fn render_image_description(
    scene: &SceneAnnotation,
    templates: &[PromptTemplate],
    table: &CategoryTable,
    seed: u64,
) -> Result<Description> {
    Renderer::new(templates, table)?.describe(scene, seed)
}

const OBJECT_PREFIX: &str = "a photo of a ";

/// Object-level prompt naming a single category.
pub fn render_object_description(category_id: usize, table: &CategoryTable) -> Result<Description> {
    let name = table
        .name(category_id)
        .map_err(|_| PromptError::UnknownCategory(category_id))?;
    let mut out = TextBuilder::default();
    out.push(OBJECT_PREFIX);
    out.push_span(name, SpanTarget::Category { category_id });
    out.push(".");
    Ok(Description {
        text: out.text,
        template_id: "object".to_string(),
        order_seed: 0,
        spans: out.spans,
    })
}

/// Object-level prompt for the background class (index 0).
pub fn render_background_description() -> Description {
    let mut out = TextBuilder::default();
    out.push("a photo of the ");
    out.push_span("background", SpanTarget::Category { category_id: 0 });
    out.push(".");
    Description {
        text: out.text,
        template_id: "object".to_string(),
        order_seed: 0,
        spans: out.spans,
    }
}
