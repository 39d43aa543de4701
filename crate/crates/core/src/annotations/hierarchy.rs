use super::{AnnotationError, CategoryTable, Result};
use std::collections::HashSet;
use std::path::Path;

/// Parent assignment for every dense category id.
///
/// Two categories are siblings when they share a parent label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hierarchy {
    parents: Vec<String>,
}

impl Hierarchy {
    /// Every category is its own singleton parent.
    pub fn singletons(table: &CategoryTable) -> Self {
        Self {
            parents: table.iter().map(|(_, c)| c.name.clone()).collect(),
        }
    }

    /// Builds a hierarchy from `(category name, parent)` pairs. Categories
    /// not mentioned fall back to a singleton parent named after themselves.
    pub fn from_pairs<S: AsRef<str>>(table: &CategoryTable, pairs: &[(S, S)]) -> Result<Self> {
        let mut h = Self::singletons(table);
        let mut seen = HashSet::new();
        let mut problems = Vec::new();
        for (name, parent) in pairs {
            let (name, parent) = (name.as_ref(), parent.as_ref());
            if !seen.insert(name.to_string()) {
                problems.push(format!("hierarchy: duplicate entry for category {name:?}"));
                continue;
            }
            match table.id_of(name) {
                Some(id) => h.parents[id - 1] = parent.to_string(),
                None => problems.push(format!("hierarchy: unknown category {name:?}")),
            }
        }
        if problems.is_empty() {
            Ok(h)
        } else {
            Err(AnnotationError::Validation(problems))
        }
    }

    pub fn parent(&self, category_id: usize) -> Option<&str> {
        category_id
            .checked_sub(1)
            .and_then(|k| self.parents.get(k))
            .map(String::as_str)
    }

    /// Other categories sharing `category_id`'s parent, ascending.
    pub fn siblings(&self, category_id: usize) -> Vec<usize> {
        let Some(parent) = self.parent(category_id) else {
            return Vec::new();
        };
        self.parents
            .iter()
            .enumerate()
            .filter(|(k, p)| k + 1 != category_id && p.as_str() == parent)
            .map(|(k, _)| k + 1)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    /// Renders the `category<TAB>parent` text form.
    pub fn to_tsv(&self, table: &CategoryTable) -> String {
        let mut out = String::new();
        for (id, c) in table.iter() {
            out.push_str(&c.name);
            out.push('\t');
            out.push_str(&self.parents[id - 1]);
            out.push('\n');
        }
        out
    }
}

/// Parses a `category<TAB>parent` document. Blank lines and lines starting
/// with `#` are ignored.
pub fn parse_hierarchy(text: &str, table: &CategoryTable) -> Result<Hierarchy> {
    let mut pairs = Vec::new();
    let mut problems = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        match line.split_once('\t') {
            Some((name, parent)) if !name.is_empty() && !parent.trim().is_empty() => {
                pairs.push((name.to_string(), parent.trim().to_string()))
            }
            _ => problems.push(format!(
                "hierarchy line {}: expected \"category<TAB>parent\"",
                lineno + 1
            )),
        }
    }
    if !problems.is_empty() {
        return Err(AnnotationError::Validation(problems));
    }
    Hierarchy::from_pairs(table, &pairs)
}

pub fn load_hierarchy(path: impl AsRef<Path>, table: &CategoryTable) -> Result<Hierarchy> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| AnnotationError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_hierarchy(&text, table)
}
