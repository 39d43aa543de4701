//! InfoNCE objectives with analytic gradients.
//!
//! All similarities are plain dot products; callers supply unit-norm
//! features so that the dot product is the cosine similarity. Every
//! softmax subtracts the row maximum before exponentiating, so values stay
//! finite for any positive temperature.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

use crate::embedding::FeatureVector;

pub const DEFAULT_TAU: f64 = 0.07;
pub const DEFAULT_LAMBDA_VG: f64 = 0.5;
pub const DEFAULT_LAMBDA_LG: f64 = 0.5;
pub const DEFAULT_LAMBDA_O: f64 = 0.1;

/// Tolerance on `‖v‖ = 1` for rows of a checked [`FeatureBatch`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MiError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("batch sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },
    #[error("{role} row {row} has norm {norm}, expected unit norm")]
    NotUnitNorm {
        role: FeatureRole,
        row: usize,
        norm: f64,
    },
    #[error("object {index} has label {label}, expected 1..={classes}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
    #[error("rank {0} appears more than once")]
    DuplicateRank(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, MiError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    VisualGlobal,
    LinguisticGlobal,
    VisualObject,
    LinguisticCategory,
    HardNegative,
}

impl fmt::Display for FeatureRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureRole::VisualGlobal => "visual_global",
            FeatureRole::LinguisticGlobal => "linguistic_global",
            FeatureRole::VisualObject => "visual_object",
            FeatureRole::LinguisticCategory => "linguistic_category",
            FeatureRole::HardNegative => "hard_negative",
        };
        f.write_str(s)
    }
}

/// Row-major batch of feature vectors sharing one role.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    pub role: FeatureRole,
    vectors: Array2<f64>,
}

impl FeatureBatch {
    /// Checks that every row is unit-norm.
    pub fn new(role: FeatureRole, vectors: Array2<f64>) -> Result<Self> {
        for (row, v) in vectors.rows().into_iter().enumerate() {
            let norm = v.dot(&v).sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(MiError::NotUnitNorm { role, row, norm });
            }
        }
        Ok(Self { role, vectors })
    }

    /// Skips the unit-norm check. Used for finite-difference perturbations.
    pub fn from_raw(role: FeatureRole, vectors: Array2<f64>) -> Self {
        Self { role, vectors }
    }

    pub fn empty(role: FeatureRole, dim: usize) -> Self {
        Self {
            role,
            vectors: Array2::zeros((0, dim)),
        }
    }

    pub fn from_vectors(role: FeatureRole, dim: usize, rows: &[FeatureVector]) -> Result<Self> {
        let mut vectors = Array2::zeros((rows.len(), dim));
        for (i, fv) in rows.iter().enumerate() {
            if fv.dim() != dim {
                return Err(MiError::DimensionMismatch {
                    expected: dim,
                    found: fv.dim(),
                });
            }
            vectors.row_mut(i).assign(&fv.view());
        }
        Self::new(role, vectors)
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }

    /// Reorders rows: row `k` of the result is row `order[k]` of `self`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            role: self.role,
            vectors: self.vectors.select(Axis(0), order),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_vg: f64,
    pub lambda_lg: f64,
    pub lambda_o: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda_vg: DEFAULT_LAMBDA_VG,
            lambda_lg: DEFAULT_LAMBDA_LG,
            lambda_o: DEFAULT_LAMBDA_O,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MiError::InvalidConfig(format!(
                "tau must be positive and finite, got {}",
                self.tau
            )));
        }
        for (name, v) in [
            ("lambda_vg", self.lambda_vg),
            ("lambda_lg", self.lambda_lg),
            ("lambda_o", self.lambda_o),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(MiError::InvalidConfig(format!(
                    "{name} must be non-negative and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which tensor a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradTarget {
    Features(FeatureRole),
    /// Hard negatives of image `i` (per-image mode) or the whole shared pool
    /// (shared mode, always index 0).
    HardNegatives(usize),
    /// Classifier logits of the detection surrogate.
    Logits,
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradTarget::Features(role) => write!(f, "{role}"),
            GradTarget::HardNegatives(i) => write!(f, "hard_negative[{i}]"),
            GradTarget::Logits => f.write_str("logits"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub target: GradTarget,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Gradient>,
}

impl LossOutput {
    /// A constant with no gradients.
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            grads: Vec::new(),
        }
    }

    /// Sum of all gradients with the given target.
    pub fn grad(&self, target: GradTarget) -> Option<Array2<f64>> {
        let mut acc: Option<Array2<f64>> = None;
        for g in self.grads.iter().filter(|g| g.target == target) {
            match acc.as_mut() {
                Some(a) => *a += &g.values,
                None => acc = Some(g.values.clone()),
            }
        }
        acc
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.iter().all(|g| g.values.iter().all(|v| v.is_finite()))
    }

    pub fn report(&self, loss_name: &str) -> LossReport {
        let mut grad_norms = BTreeMap::new();
        for g in &self.grads {
            let sq: f64 = g.values.iter().map(|v| v * v).sum();
            *grad_norms.entry(g.target.to_string()).or_insert(0.0) += sq;
        }
        for v in grad_norms.values_mut() {
            *v = v.sqrt();
        }
        LossReport {
            loss_name: loss_name.to_string(),
            value: self.value,
            grad_norms,
        }
    }
}

/// Structured log record for one loss evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss_name: String,
    pub value: f64,
    pub grad_norms: BTreeMap<String, f64>,
}

/// Whether hard negatives enter only their own image's denominator or
/// every image's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSharing {
    #[default]
    PerImage,
    Shared,
}

fn check_dims(a: &FeatureBatch, b: &FeatureBatch) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(MiError::DimensionMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    LossConfig {
        tau,
        ..LossConfig::default()
    }
    .validate()
}

/// `A · Bᵀ`.
pub fn cosine_matrix(a: &FeatureBatch, b: &FeatureBatch) -> Result<Array2<f64>> {
    check_dims(a, b)?;
    Ok(a.vectors.dot(&b.vectors.t()))
}

/// Cross-entropy of `softmax(logits)` against `target`, returning the loss
/// and the probabilities.
fn softmax_ce(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = (m - logits[target]) + sum.ln();
    (loss, exps.into_iter().map(|e| e / sum).collect())
}

struct ContrastiveOut {
    value: f64,
    d_anchor: Array2<f64>,
    d_cand: Array2<f64>,
    d_neg: Array2<f64>,
}

/// Shared row kernel: anchor `i` is paired with candidate `i`; row `i`'s
/// denominator also covers `negatives[ranges[i]]`.
fn contrastive(
    anchors: ArrayView2<'_, f64>,
    cands: ArrayView2<'_, f64>,
    negatives: ArrayView2<'_, f64>,
    ranges: &[(usize, usize)],
    tau: f64,
) -> ContrastiveOut {
    let n = anchors.nrows();
    let m = negatives.nrows();
    let sims = anchors.dot(&cands.t());
    let neg_sims = if m > 0 {
        Some(anchors.dot(&negatives.t()))
    } else {
        None
    };
    let mut ds = Array2::zeros((n, n));
    let mut dh = Array2::zeros((n, m));
    let mut total = 0.0;
    let scale = tau * n as f64;
    for i in 0..n {
        let (lo, hi) = ranges.get(i).copied().unwrap_or((0, 0));
        let mut logits: Vec<f64> = sims.row(i).iter().map(|v| v / tau).collect();
        if let Some(ns) = &neg_sims {
            logits.extend(ns.slice(s![i, lo..hi]).iter().map(|v| v / tau));
        }
        let (loss, probs) = softmax_ce(&logits, i);
        total += loss;
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            ds[[i, j]] = (probs[j] - delta) / scale;
        }
        for k in lo..hi {
            dh[[i, k]] = probs[n + k - lo] / scale;
        }
    }
    let mut d_anchor = ds.dot(&cands);
    if m > 0 {
        d_anchor += &dh.dot(&negatives);
    }
    ContrastiveOut {
        value: total / n as f64,
        d_anchor,
        d_cand: ds.t().dot(&anchors),
        d_neg: dh.t().dot(&anchors),
    }
}

fn check_pairs(a: &FeatureBatch, b: &FeatureBatch, tau: f64) -> Result<()> {
    check_tau(tau)?;
    if a.is_empty() || b.is_empty() {
        return Err(MiError::EmptyBatch);
    }
    if a.len() != b.len() {
        return Err(MiError::SizeMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    check_dims(a, b)
}

/// Visual-anchored InfoNCE averaged over the batch; pair `i` is
/// `(f_v[i], f_l[i])`.
pub fn infonce_visual(f_v: &FeatureBatch, f_l: &FeatureBatch, tau: f64) -> Result<LossOutput> {
    infonce_hard(f_v, f_l, &[], tau, NegativeSharing::PerImage)
}

/// Text-anchored counterpart of [`infonce_visual`].
pub fn infonce_text(f_l: &FeatureBatch, f_v: &FeatureBatch, tau: f64) -> Result<LossOutput> {
    check_pairs(f_l, f_v, tau)?;
    let empty = Array2::zeros((0, f_l.dim()));
    let out = contrastive(f_l.vectors(), f_v.vectors(), empty.view(), &[], tau);
    Ok(LossOutput {
        value: out.value,
        grads: vec![
            Gradient {
                target: GradTarget::Features(f_l.role),
                values: out.d_anchor,
            },
            Gradient {
                target: GradTarget::Features(f_v.role),
                values: out.d_cand,
            },
        ],
    })
}

/// [`infonce_visual`] whose denominators also include hard negatives.
///
/// `negatives` is either empty (no negatives anywhere) or holds one batch
/// per image, possibly with zero rows. Gradients for the negatives are
/// returned per image as `GradTarget::HardNegatives(i)` in both sharing
/// modes.
pub fn infonce_hard(
    f_v: &FeatureBatch,
    f_l: &FeatureBatch,
    negatives: &[FeatureBatch],
    tau: f64,
    sharing: NegativeSharing,
) -> Result<LossOutput> {
    check_pairs(f_v, f_l, tau)?;
    let n = f_v.len();
    if !negatives.is_empty() && negatives.len() != n {
        return Err(MiError::SizeMismatch {
            left: n,
            right: negatives.len(),
        });
    }
    let d = f_v.dim();
    let mut blocks = Vec::with_capacity(negatives.len());
    let mut start = 0;
    for h in negatives {
        if !h.is_empty() {
            check_dims(f_v, h)?;
        }
        blocks.push((start, start + h.len()));
        start += h.len();
    }
    let total = start;
    let mut pool = Array2::zeros((total, d));
    for (h, &(lo, hi)) in negatives.iter().zip(&blocks) {
        if hi > lo {
            pool.slice_mut(s![lo..hi, ..]).assign(&h.vectors);
        }
    }
    let ranges: Vec<(usize, usize)> = match sharing {
        NegativeSharing::PerImage => blocks.clone(),
        NegativeSharing::Shared => vec![(0, total); if total > 0 { n } else { 0 }],
    };
    let out = contrastive(f_v.vectors(), f_l.vectors(), pool.view(), &ranges, tau);
    let mut grads = vec![
        Gradient {
            target: GradTarget::Features(f_v.role),
            values: out.d_anchor,
        },
        Gradient {
            target: GradTarget::Features(f_l.role),
            values: out.d_cand,
        },
    ];
    for (i, &(lo, hi)) in blocks.iter().enumerate() {
        grads.push(Gradient {
            target: GradTarget::HardNegatives(i),
            values: out.d_neg.slice(s![lo..hi, ..]).to_owned(),
        });
    }
    Ok(LossOutput {
        value: out.value,
        grads,
    })
}

/// Object-to-category InfoNCE summed over objects. Row `0` of `f_cat` is
/// the background feature; labels must lie in `1..=C`.
pub fn infonce_object(
    f_obj: &FeatureBatch,
    f_cat: &FeatureBatch,
    labels: &[usize],
    tau: f64,
) -> Result<LossOutput> {
    check_tau(tau)?;
    if f_cat.len() < 2 {
        return Err(MiError::EmptyBatch);
    }
    if labels.len() != f_obj.len() {
        return Err(MiError::SizeMismatch {
            left: f_obj.len(),
            right: labels.len(),
        });
    }
    let classes = f_cat.len() - 1;
    if let Some((index, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l == 0 || l > classes)
    {
        return Err(MiError::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    if !f_obj.is_empty() {
        check_dims(f_cat, f_obj)?;
    }
    let sims = f_obj.vectors.dot(&f_cat.vectors.t());
    let mut ds = Array2::zeros(sims.raw_dim());
    let mut total = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let logits: Vec<f64> = sims.row(i).iter().map(|v| v / tau).collect();
        let (loss, probs) = softmax_ce(&logits, label);
        total += loss;
        for (j, p) in probs.iter().enumerate() {
            let delta = if j == label { 1.0 } else { 0.0 };
            ds[[i, j]] = (p - delta) / tau;
        }
    }
    Ok(LossOutput {
        value: total,
        grads: vec![
            Gradient {
                target: GradTarget::Features(f_obj.role),
                values: ds.dot(&f_cat.vectors),
            },
            Gradient {
                target: GradTarget::Features(f_cat.role),
                values: ds.t().dot(&f_obj.vectors),
            },
        ],
    })
}

/// `det + λ_vg·vg + λ_lg·lg + λ_o·o`, with gradients merged by target.
pub fn combined_loss(
    det: &LossOutput,
    l_vg: &LossOutput,
    l_lg: &LossOutput,
    l_o: &LossOutput,
    config: &LossConfig,
) -> Result<LossOutput> {
    config.validate()?;
    let parts = [
        ("detection", 1.0, det),
        ("visual", config.lambda_vg, l_vg),
        ("text", config.lambda_lg, l_lg),
        ("object", config.lambda_o, l_o),
    ];
    let mut value = 0.0;
    let mut merged: BTreeMap<GradTarget, Array2<f64>> = BTreeMap::new();
    for (name, weight, part) in parts {
        if !part.is_finite() {
            return Err(MiError::NonFinite(format!("{name} loss")));
        }
        value += weight * part.value;
        for g in &part.grads {
            match merged.get_mut(&g.target) {
                Some(acc) => {
                    if acc.dim() != g.values.dim() {
                        return Err(MiError::SizeMismatch {
                            left: acc.nrows(),
                            right: g.values.nrows(),
                        });
                    }
                    acc.scaled_add(weight, &g.values);
                }
                None => {
                    merged.insert(g.target, &g.values * weight);
                }
            }
        }
    }
    Ok(LossOutput {
        value,
        grads: merged
            .into_iter()
            .map(|(target, values)| Gradient { target, values })
            .collect(),
    })
}

/// Concatenates per-worker batches in ascending rank order.
pub fn gather_features(batches: &[FeatureBatch], ranks: &[usize]) -> Result<FeatureBatch> {
    if batches.is_empty() {
        return Err(MiError::EmptyBatch);
    }
    if batches.len() != ranks.len() {
        return Err(MiError::SizeMismatch {
            left: batches.len(),
            right: ranks.len(),
        });
    }
    let mut order: Vec<usize> = (0..batches.len()).collect();
    order.sort_by_key(|&k| ranks[k]);
    if let Some(w) = order.windows(2).find(|w| ranks[w[0]] == ranks[w[1]]) {
        return Err(MiError::DuplicateRank(ranks[w[0]]));
    }
    let first = &batches[order[0]];
    for &k in &order[1..] {
        check_dims(first, &batches[k])?;
    }
    let views: Vec<ArrayView2<'_, f64>> = order.iter().map(|&k| batches[k].vectors()).collect();
    let vectors = ndarray::concatenate(Axis(0), &views)
        .map_err(|e| MiError::InvalidConfig(e.to_string()))?;
    Ok(FeatureBatch::from_raw(first.role, vectors))
}

/// Row-wise L2 norms.
pub fn row_norms(m: ArrayView2<'_, f64>) -> Array1<f64> {
    m.map_axis(Axis(1), |r| r.dot(&r).sqrt())
}
