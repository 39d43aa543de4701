//! Deterministic toy encoders and trainable two-layer projection heads.
//!
//! Text is tokenized into lowercase words, each word is mapped to a unit
//! vector drawn from a ChaCha stream seeded by the word's FNV-1a hash, and
//! a sequence is mean-pooled. Projection heads map encoder outputs into the
//! shared `d`-dimensional space and L2-normalize:
//!
//! ```text
//! y = normalize(W2 · relu(W1 · x + b1) + b2)
//! ```

use crate::seeds;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

/// Embedding width of the full-scale detector.
pub const FULL_SCALE_DIM: usize = 1024;
/// Default embedding width for desk-scale runs.
pub const DEFAULT_DIM: usize = 64;

const TOKEN_SALT: u64 = 0x746f_6b65_6e73_0001;
const HEADER_FIELDS: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EmbeddingError {
    #[error("cannot normalize a zero-norm vector (row {row})")]
    ZeroNorm { row: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed parameter blob: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().map(Into::into).collect(),
        }
    }
}

/// Lowercases, splits on whitespace and strips punctuation from both ends
/// of every word. Inner punctuation (`top-left`) is kept.
pub fn tokenize(text: &str) -> TokenSequence {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl FeatureVector {
    pub fn raw(values: Vec<f64>) -> Self {
        Self {
            values,
            normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn normalize(&self) -> Result<FeatureVector> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(EmbeddingError::ZeroNorm { row: 0 });
        }
        Ok(FeatureVector {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }

    pub fn view(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[..])
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Unit vector for one token, fixed by the token's bytes.
pub fn token_vector(token: &str, d_in: usize) -> Vec<f64> {
    let mut rng = seeds::rng(seeds::fnv1a(token.as_bytes()) ^ TOKEN_SALT);
    let raw: Vec<f64> = (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = l2_norm(&raw);
    raw.into_iter().map(|v| v / n).collect()
}

/// Mean of the token vectors; the zero vector for an empty sequence.
pub fn hash_embed(tokens: &TokenSequence, d_in: usize) -> FeatureVector {
    let vectors: Vec<Vec<f64>> = tokens.tokens.iter().map(|t| token_vector(t, d_in)).collect();
    mean_pool(vectors.iter().map(Vec::as_slice), tokens.len(), d_in)
}

fn mean_pool<'a>(vectors: impl Iterator<Item = &'a [f64]>, n: usize, d_in: usize) -> FeatureVector {
    let mut acc = vec![0.0; d_in];
    for v in vectors {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    if n > 0 {
        let inv = n as f64;
        acc.iter_mut().for_each(|a| *a /= inv);
    }
    FeatureVector::raw(acc)
}

/// [`hash_embed`] with a per-token cache; produces identical vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    d_in: usize,
    cache: HashMap<String, Vec<f64>>,
}

impl HashEmbedder {
    pub fn new(d_in: usize) -> Self {
        Self {
            d_in,
            cache: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.d_in
    }

    pub fn embed(&mut self, tokens: &TokenSequence) -> FeatureVector {
        for t in &tokens.tokens {
            if !self.cache.contains_key(t) {
                self.cache.insert(t.clone(), token_vector(t, self.d_in));
            }
        }
        let cache = &self.cache;
        mean_pool(
            tokens.tokens.iter().map(|t| cache[t].as_slice()),
            tokens.len(),
            self.d_in,
        )
    }

    pub fn embed_text(&mut self, text: &str) -> FeatureVector {
        self.embed(&tokenize(text))
    }
}

/// Row-wise L2 normalization. Fails on the first zero-norm row.
pub fn normalize_rows(z: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms: Array1<f64> = z.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    if let Some(row) = norms.iter().position(|n| *n == 0.0 || !n.is_finite()) {
        return Err(EmbeddingError::ZeroNorm { row });
    }
    let out = z / &norms.view().insert_axis(Axis(1));
    Ok((out, norms))
}

/// Two-layer MLP followed by L2 normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    /// `d_hidden × d_in`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `d × d_hidden`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub seed: u64,
}

/// Intermediate values of a batched forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub input: Array2<f64>,
    pub pre: Array2<f64>,
    pub hidden: Array2<f64>,
    pub norms: Array1<f64>,
    /// Unit-norm outputs, one row per input.
    pub output: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub input: Array2<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &ProjectionHead) -> Self {
        Self {
            w1: Array2::zeros(head.w1.raw_dim()),
            b1: Array1::zeros(head.b1.raw_dim()),
            w2: Array2::zeros(head.w2.raw_dim()),
            b2: Array1::zeros(head.b2.raw_dim()),
            input: Array2::zeros((0, head.d_in())),
        }
    }

    /// Accumulates parameter gradients; input gradients are not merged.
    pub fn add_params(&mut self, other: &HeadGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn param_norm(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
    }
}

impl ProjectionHead {
    /// He-style initialization for the rectified layer, zero biases.
    pub fn random(d_in: usize, d_hidden: usize, d: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let mut gauss = |rows: usize, cols: usize, scale: f64| {
            Array2::from_shape_simple_fn((rows, cols), || {
                scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let w1 = gauss(d_hidden, d_in, (2.0 / d_in as f64).sqrt());
        let w2 = gauss(d, d_hidden, (1.0 / d_hidden as f64).sqrt());
        Self {
            w1,
            b1: Array1::zeros(d_hidden),
            w2,
            b2: Array1::zeros(d),
            seed,
        }
    }

    /// Identity weights with zero biases (`d_in = d_hidden = d`).
    pub fn identity(d: usize) -> Self {
        Self {
            w1: Array2::eye(d),
            b1: Array1::zeros(d),
            w2: Array2::eye(d),
            b2: Array1::zeros(d),
            seed: 0,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.w2.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }

    pub fn forward_batch(&self, input: ArrayView2<'_, f64>) -> Result<HeadForward> {
        if input.ncols() != self.d_in() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.d_in(),
                found: input.ncols(),
            });
        }
        let pre = input.dot(&self.w1.t()) + &self.b1;
        let hidden = pre.mapv(|v| v.max(0.0));
        let z = hidden.dot(&self.w2.t()) + &self.b2;
        let (output, norms) = normalize_rows(&z)?;
        Ok(HeadForward {
            input: input.to_owned(),
            pre,
            hidden,
            norms,
            output,
        })
    }

    /// Gradients of `Σ_i ⟨upstream_i, output_i⟩` with respect to the
    /// parameters and the inputs.
    pub fn backward_batch(&self, fwd: &HeadForward, upstream: ArrayView2<'_, f64>) -> HeadGrads {
        let y = &fwd.output;
        let radial = (y * &upstream).sum_axis(Axis(1)).insert_axis(Axis(1));
        let dz = (&upstream - &(y * &radial)) / &fwd.norms.view().insert_axis(Axis(1));
        let w2 = dz.t().dot(&fwd.hidden);
        let b2 = dz.sum_axis(Axis(0));
        let mut dpre = dz.dot(&self.w2);
        dpre.zip_mut_with(&fwd.pre, |g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
        let w1 = dpre.t().dot(&fwd.input);
        let b1 = dpre.sum_axis(Axis(0));
        let input = dpre.dot(&self.w1);
        HeadGrads {
            w1,
            b1,
            w2,
            b2,
            input,
        }
    }

    /// Plain gradient descent step.
    pub fn apply(&mut self, grads: &HeadGrads, lr: f64) {
        self.w1.scaled_add(-lr, &grads.w1);
        self.b1.scaled_add(-lr, &grads.b1);
        self.w2.scaled_add(-lr, &grads.w2);
        self.b2.scaled_add(-lr, &grads.b2);
    }

    /// Parameters flattened as `W1, b1, W2, b2`, row-major.
    pub fn params(&self) -> Vec<f64> {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
            .collect()
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.num_params(),
                found: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for slot in self
            .w1
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.iter_mut())
            .chain(self.b2.iter_mut())
        {
            *slot = it.next().expect("length checked");
        }
        Ok(())
    }

    /// Little-endian blob: `u64` header `{d_in, d_hidden, d, seed}` then the
    /// `f64` parameters in [`ProjectionHead::params`] order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [
            self.d_in() as u64,
            self.d_hidden() as u64,
            self.d_out() as u64,
            self.seed,
        ];
        encode(&header, &self.params())
    }

    /// Decodes one head, returning it and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let (header, body) = decode_header(bytes)?;
        let [d_in, d_hidden, d, seed] = header;
        let (d_in, d_hidden, d) = (d_in as usize, d_hidden as usize, d as usize);
        if d_hidden == 0 {
            return Err(EmbeddingError::Format("d_hidden = 0 is a linear head".into()));
        }
        let mut head = Self {
            w1: Array2::zeros((d_hidden, d_in)),
            b1: Array1::zeros(d_hidden),
            w2: Array2::zeros((d, d_hidden)),
            b2: Array1::zeros(d),
            seed,
        };
        let n = head.num_params();
        let flat = decode_floats(body, n)?;
        head.set_params(&flat)?;
        Ok((head, HEADER_FIELDS * 8 + n * 8))
    }
}

/// Forward pass for a single vector.
pub fn project(head: &ProjectionHead, input: &FeatureVector) -> Result<FeatureVector> {
    let x = input.view().insert_axis(Axis(0));
    let fwd = head.forward_batch(x)?;
    Ok(FeatureVector {
        values: fwd.output.row(0).to_vec(),
        normalized: true,
    })
}

/// Gradients of `⟨upstream, project(head, input)⟩`.
pub fn project_backward(
    head: &ProjectionHead,
    input: &FeatureVector,
    upstream: &[f64],
) -> Result<HeadGrads> {
    if upstream.len() != head.d_out() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: head.d_out(),
            found: upstream.len(),
        });
    }
    let fwd = head.forward_batch(input.view().insert_axis(Axis(0)))?;
    let g = ArrayView1::from(upstream).insert_axis(Axis(0));
    Ok(head.backward_batch(&fwd, g))
}

/// Affine map without activation or normalization, stored in the same blob
/// format with `d_hidden = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// `d × d_in`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub seed: u64,
}

impl LinearHead {
    pub fn random(d_in: usize, d: usize, seed: u64) -> Self {
        let mut rng = seeds::rng(seed);
        let scale = (1.0 / d_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((d, d_in), || {
            scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        Self {
            w,
            b: Array1::zeros(d),
            seed,
        }
    }

    pub fn forward(&self, input: ArrayView2<'_, f64>) -> Array2<f64> {
        input.dot(&self.w.t()) + &self.b
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = [self.w.ncols() as u64, 0, self.w.nrows() as u64, self.seed];
        let params: Vec<f64> = self.w.iter().chain(self.b.iter()).copied().collect();
        encode(&header, &params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let (header, body) = decode_header(bytes)?;
        let [d_in, d_hidden, d, seed] = header;
        if d_hidden != 0 {
            return Err(EmbeddingError::Format("expected a linear head".into()));
        }
        let (d_in, d) = (d_in as usize, d as usize);
        let n = d * d_in + d;
        let flat = decode_floats(body, n)?;
        let w = Array2::from_shape_vec((d, d_in), flat[..d * d_in].to_vec())
            .map_err(|e| EmbeddingError::Format(e.to_string()))?;
        let b = Array1::from(flat[d * d_in..].to_vec());
        Ok((Self { w, b, seed }, HEADER_FIELDS * 8 + n * 8))
    }
}

fn encode(header: &[u64; HEADER_FIELDS], params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_FIELDS * 8 + params.len() * 8);
    for h in header {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn decode_header(bytes: &[u8]) -> Result<([u64; HEADER_FIELDS], &[u8])> {
    if bytes.len() < HEADER_FIELDS * 8 {
        return Err(EmbeddingError::Format("truncated header".into()));
    }
    let mut header = [0u64; HEADER_FIELDS];
    for (k, h) in header.iter_mut().enumerate() {
        *h = u64::from_le_bytes(bytes[k * 8..k * 8 + 8].try_into().expect("8 bytes"));
    }
    Ok((header, &bytes[HEADER_FIELDS * 8..]))
}

fn decode_floats(body: &[u8], n: usize) -> Result<Vec<f64>> {
    if body.len() < n * 8 {
        return Err(EmbeddingError::Format(format!(
            "expected {n} parameters, found {} bytes",
            body.len()
        )));
    }
    Ok(body[..n * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn words(ws: &[&str]) -> TokenSequence {
        ws.iter().copied().collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("A small dog.").tokens(), &["a", "small", "dog"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("top-left").tokens(), &["top-left"]);
        assert_eq!(tokenize("  \"Hi,\"  there!! ... ").tokens(), &["hi", "there"]);
    }

    #[test]
    fn hash_embedding_is_deterministic() {
        let a = hash_embed(&words(&["dog", "cat"]), 32);
        let b = hash_embed(&words(&["dog", "cat"]), 32);
        assert_eq!(a, b);
        assert_eq!(hash_embed(&TokenSequence::default(), 8).values, vec![0.0; 8]);
        assert!((l2_norm(&token_vector("dog", 64)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cached_embedder_matches() {
        let mut e = HashEmbedder::new(48);
        let t = tokenize("There are two dogs: a small one at the top left.");
        assert_eq!(e.embed(&t), hash_embed(&t, 48));
        assert_eq!(e.embed(&t), hash_embed(&t, 48));
    }

    #[test]
    fn mean_pool_is_permutation_invariant() {
        let a = hash_embed(&words(&["a", "b", "c", "d"]), 64);
        let b = hash_embed(&words(&["d", "b", "a", "c"]), 64);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_head_keeps_nonnegative_unit_vectors() {
        let head = ProjectionHead::identity(4);
        let x = FeatureVector::raw(vec![0.5, 0.5, 0.5, 0.5]);
        let y = project(&head, &x).unwrap();
        assert_eq!(y.values, x.values);
        assert!(y.normalized);
    }

    #[test]
    fn zero_input_signals_zero_norm() {
        let head = ProjectionHead::random(3, 5, 2, 1);
        let err = project(&head, &FeatureVector::raw(vec![0.0; 3])).unwrap_err();
        assert_eq!(err, EmbeddingError::ZeroNorm { row: 0 });
    }

    #[test]
    fn dimension_mismatch() {
        let head = ProjectionHead::random(3, 5, 2, 1);
        assert!(matches!(
            project(&head, &FeatureVector::raw(vec![1.0; 4])),
            Err(EmbeddingError::DimensionMismatch { expected: 3, found: 4 })
        ));
    }

    fn naive_project(head: &ProjectionHead, x: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; head.d_hidden()];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = head.b1[j];
            for (k, xk) in x.iter().enumerate() {
                s += head.w1[[j, k]] * xk;
            }
            *h = if s > 0.0 { s } else { 0.0 };
        }
        let mut z = vec![0.0; head.d_out()];
        for (i, zi) in z.iter_mut().enumerate() {
            let mut s = head.b2[i];
            for (j, hj) in hidden.iter().enumerate() {
                s += head.w2[[i, j]] * hj;
            }
            *zi = s;
        }
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        z.into_iter().map(|v| v / n).collect()
    }

    #[test]
    fn forward_matches_naive_evaluator() {
        let mut rng = seeds::rng(11);
        for trial in 0..20 {
            let mut head = ProjectionHead::random(7, 9, 5, trial);
            head.b1.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            head.b2.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            let x: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = project(&head, &FeatureVector::raw(x.clone())).unwrap();
            let want = naive_project(&head, &x);
            for (g, w) in got.values.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            assert!((got.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_edge_cases() {
        let head = ProjectionHead::random(4, 6, 3, 5);
        let x = FeatureVector::raw(vec![0.3, -0.2, 0.8, 0.1]);
        let g = project_backward(&head, &x, &[0.0; 3]).unwrap();
        assert_eq!(g.param_norm(), 0.0);
        assert!(g.input.iter().all(|v| *v == 0.0));

        let fwd = head.forward_batch(x.view().insert_axis(Axis(0))).unwrap();
        let g = project_backward(&head, &x, &[1.0, -0.5, 0.25]).unwrap();
        for (j, pre) in fwd.pre.row(0).iter().enumerate() {
            if *pre <= 0.0 {
                assert_eq!(g.b1[j], 0.0);
                assert!(g.w1.row(j).iter().all(|v| *v == 0.0));
            }
        }
    }

    #[test]
    fn normalize_is_idempotent() {
        let v = FeatureVector::raw(vec![3.0, -4.0, 12.0]);
        let once = v.normalize().unwrap();
        let twice = once.normalize().unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(FeatureVector::raw(vec![0.0, 0.0]).normalize().is_err());
    }

    #[test]
    fn blob_round_trip() {
        let head = ProjectionHead::random(6, 8, 4, 99);
        let bytes = head.to_bytes();
        assert_eq!(&bytes[..8], &6u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &99u64.to_le_bytes());
        let (back, used) = ProjectionHead::from_bytes(&bytes).unwrap();
        assert_eq!(back, head);
        assert_eq!(used, bytes.len());
        assert!(ProjectionHead::from_bytes(&bytes[..40]).is_err());

        let lin = LinearHead::random(5, 3, 4);
        let (lin_back, used) = LinearHead::from_bytes(&lin.to_bytes()).unwrap();
        assert_eq!(lin_back, lin);
        assert_eq!(used, lin.to_bytes().len());
        assert!(LinearHead::from_bytes(&bytes).is_err());
    }
}
