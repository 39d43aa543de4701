//! Toy detector surrogate: projection heads on both modalities plus a
//! linear classifier over object signatures.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::synthetic::SyntheticScene;
use crate::embedding::{EmbeddingError, LinearHead, ProjectionHead};
use crate::prompting::{position_bin, PositionLabel};
use crate::seeds;

/// Normalized `(cx, cy, w, h)` appended to every object signature.
pub const GEOMETRY_DIM: usize = 4;
const CELLS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorShape {
    pub signature_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub dim: usize,
    pub num_categories: usize,
}

impl DetectorShape {
    pub fn object_input(&self) -> usize {
        self.signature_dim + GEOMETRY_DIM
    }

    /// Whole-image pooled signature, then one block per grid cell.
    pub fn global_input(&self) -> usize {
        (CELLS + 1) * (self.signature_dim + 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector {
    /// Object signature ⊕ geometry → `d`.
    pub object_encoder: ProjectionHead,
    /// Pooled scene grid → `d`.
    pub global_encoder: ProjectionHead,
    /// Hash-embedded description → `d`.
    pub text_global: ProjectionHead,
    /// Hash-embedded object prompt → `d`.
    pub text_category: ProjectionHead,
    /// Signature → `C + 1` scores.
    pub classifier: LinearHead,
}

impl ToyDetector {
    pub fn new(shape: &DetectorShape, seed: u64) -> Self {
        let s = |k: u64| seeds::mix(seed, k);
        Self {
            object_encoder: ProjectionHead::random(shape.object_input(), shape.hidden, shape.dim, s(1)),
            global_encoder: ProjectionHead::random(shape.global_input(), shape.hidden, shape.dim, s(2)),
            text_global: ProjectionHead::random(shape.text_dim, shape.hidden, shape.dim, s(3)),
            text_category: ProjectionHead::random(shape.text_dim, shape.hidden, shape.dim, s(4)),
            classifier: LinearHead::random(shape.signature_dim, shape.num_categories + 1, s(5)),
        }
    }

    pub fn heads(&self) -> [&ProjectionHead; 4] {
        [
            &self.object_encoder,
            &self.global_encoder,
            &self.text_global,
            &self.text_category,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.heads().iter().all(|h| h.is_finite())
            && self.classifier.w.iter().chain(self.classifier.b.iter()).all(|v| v.is_finite())
    }

    /// The four heads followed by the classifier, each in the embedding
    /// blob format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for h in self.heads() {
            out.extend(h.to_bytes());
        }
        out.extend(self.classifier.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut rest = bytes;
        let mut heads = Vec::with_capacity(4);
        for _ in 0..4 {
            let (h, used) = ProjectionHead::from_bytes(rest)?;
            heads.push(h);
            rest = &rest[used..];
        }
        let (classifier, used) = LinearHead::from_bytes(rest)?;
        if used != rest.len() {
            return Err(EmbeddingError::Format("trailing bytes after classifier".into()));
        }
        let mut it = heads.into_iter();
        Ok(Self {
            object_encoder: it.next().expect("four heads"),
            global_encoder: it.next().expect("four heads"),
            text_global: it.next().expect("four heads"),
            text_category: it.next().expect("four heads"),
            classifier,
        })
    }

    /// Softmax scores over `C + 1` classes, one row per input signature.
    pub fn scores(&self, signatures: ArrayView2<'_, f64>) -> Array2<f64> {
        softmax_rows(&self.classifier.forward(signatures))
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Signature ⊕ normalized geometry for every object of `scene`.
pub fn object_inputs(scene: &SyntheticScene) -> Vec<Vec<f64>> {
    let a = &scene.annotation;
    let (w, h) = (a.width as f64, a.height as f64);
    a.boxes
        .iter()
        .zip(&scene.signatures)
        .map(|(b, sig)| {
            let (cx, cy) = b.center();
            let mut v = sig.clone();
            v.extend([cx / w, cy / h, b.w / w, b.h / h]);
            v
        })
        .collect()
}

/// Pooled scene input, scaled to unit norm. Each object adds its signature,
/// `sqrt(area fraction)` and a unit count to the whole-image block and to
/// the block of the grid cell holding its center.
pub fn global_input(scene: &SyntheticScene, signature_dim: usize) -> Vec<f64> {
    let a = &scene.annotation;
    let block = signature_dim + 2;
    let mut v = vec![0.0; (CELLS + 1) * block];
    let image_area = a.width as f64 * a.height as f64;
    for (b, sig) in a.boxes.iter().zip(&scene.signatures) {
        let cell = PositionLabel::ALL
            .iter()
            .position(|p| *p == position_bin(b, a.width, a.height))
            .expect("nine cells");
        let root_area = (b.area() / image_area).sqrt();
        for base in [0, (cell + 1) * block] {
            for (k, s) in sig.iter().enumerate() {
                v[base + k] += s;
            }
            v[base + signature_dim] += root_area;
            v[base + signature_dim + 1] += 1.0;
        }
    }
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn stack_rows(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), dim));
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).assign(&Array1::from(r.clone()));
    }
    m
}

/// Mean cross-entropy of `softmax(logits)` against `labels`, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows().max(1) as f64;
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        loss -= probs[[i, l]].max(f64::MIN_POSITIVE).ln();
        grad[[i, l]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

/// Gradients of the classifier from a logit gradient.
pub fn classifier_grads(inputs: ArrayView2<'_, f64>, d_logits: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    (d_logits.t().dot(&inputs), d_logits.sum_axis(Axis(0)))
}
