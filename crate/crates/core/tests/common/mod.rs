//! Independent reference evaluators shared by the integration tests. None
//! of these call into the code they check.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::{Command, Output};

use mkl_core::annotations::BoundingBox;
use mkl_core::mi::{FeatureBatch, FeatureRole};
use mkl_core::negatives::ScoredPrediction;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn mkl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mkl"))
        .args(args)
        .output()
        .expect("spawn mkl")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    mkl_core::seeds::rng(seed)
}

/// `n` random unit rows of width `d`.
pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn to_array(rows: &[Vec<f64>], d: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            m[[i, j]] = *v;
        }
    }
    m
}

pub fn batch(role: FeatureRole, rows: &[Vec<f64>], d: usize) -> FeatureBatch {
    FeatureBatch::new(role, to_array(rows, d)).expect("unit rows")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += a[k] * b[k];
    }
    s
}

pub fn naive_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; b.len()]; a.len()];
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[i][j] = dot(&a[i], &b[j]);
        }
    }
    out
}

/// Mean over anchors of `-ln(exp(s_ii/τ) / (Σ_j exp(s_ij/τ) + Σ_k exp(h_ik/τ)))`,
/// evaluated literally without any shift.
pub fn naive_infonce(
    anchors: &[Vec<f64>],
    candidates: &[Vec<f64>],
    negatives: &[Vec<Vec<f64>>],
    tau: f64,
) -> f64 {
    let n = anchors.len();
    let mut total = 0.0;
    for i in 0..n {
        let num = (dot(&anchors[i], &candidates[i]) / tau).exp();
        let mut den = 0.0;
        for c in candidates {
            den += (dot(&anchors[i], c) / tau).exp();
        }
        if let Some(negs) = negatives.get(i) {
            for h in negs {
                den += (dot(&anchors[i], h) / tau).exp();
            }
        }
        total += -(num / den).ln();
    }
    total / n as f64
}

/// Sum over objects of `-ln softmax(sims / τ)[label]` over all category rows.
pub fn naive_object(objects: &[Vec<f64>], categories: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
    let mut total = 0.0;
    for (o, &label) in objects.iter().zip(labels) {
        let den: f64 = categories.iter().map(|c| (dot(o, c) / tau).exp()).sum();
        total += -((dot(o, &categories[label]) / tau).exp() / den).ln();
    }
    total
}

/// Reference failure classification: `(object, gap)` in report order and
/// `(box, category, gap)` in report order.
pub type BruteFailures = (Vec<(usize, f64)>, Vec<(BoundingBox, usize, f64)>);

pub fn brute_force_failures(preds: &[ScoredPrediction]) -> BruteFailures {
    let max_of = |s: &[f64]| s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut objects: BTreeMap<usize, Vec<&ScoredPrediction>> = BTreeMap::new();
    for p in preds.iter().filter(|p| p.assigned_label != 0) {
        objects.entry(p.matched_object.unwrap()).or_default().push(p);
    }
    let mut fns = Vec::new();
    for (o, ps) in &objects {
        let every_missed = ps.iter().all(|p| p.score[p.assigned_label] < max_of(&p.score));
        if every_missed {
            let gap = ps
                .iter()
                .map(|p| max_of(&p.score) - p.score[p.assigned_label])
                .fold(f64::INFINITY, f64::min);
            fns.push((*o, gap));
        }
    }
    fns.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));

    let mut fps: Vec<(BoundingBox, usize, f64)> = Vec::new();
    for p in preds.iter().filter(|p| p.assigned_label == 0) {
        let m = max_of(&p.score);
        if p.score[0] < m {
            let cat = p.score.iter().position(|&s| s == m).unwrap();
            let gap = m - p.score[0];
            let bbox = p.bbox.with_category(cat);
            match fps.iter_mut().find(|f| f.0 == bbox && f.1 == cat) {
                Some(f) => f.2 = f.2.max(gap),
                None => fps.push((bbox, cat, gap)),
            }
        }
    }
    // insertion sort keeps equal gaps in first-seen order
    for i in 1..fps.len() {
        let mut j = i;
        while j > 0 && fps[j - 1].2 < fps[j].2 {
            fps.swap(j - 1, j);
            j -= 1;
        }
    }
    (fns, fps)
}

/// A random prediction list: objects with one to three matched predictions
/// each, plus background proposals. Scores are coarse so ties happen.
pub fn random_predictions(rng: &mut ChaCha8Rng) -> Vec<ScoredPrediction> {
    let classes = rng.random_range(2..=6);
    let objects = rng.random_range(1..=4);
    let score = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..classes).map(|_| rng.random_range(0..=10) as f64 / 10.0).collect()
    };
    let boxes = [
        BoundingBox::new(0.0, 0.0, 10.0, 10.0, 0),
        BoundingBox::new(5.0, 5.0, 20.0, 10.0, 0),
        BoundingBox::new(50.0, 40.0, 8.0, 30.0, 0),
    ];
    let mut out = Vec::new();
    for o in 0..objects {
        let label = rng.random_range(1..classes);
        for _ in 0..rng.random_range(1..=3) {
            out.push(ScoredPrediction {
                score: score(rng),
                assigned_label: label,
                bbox: boxes[o % boxes.len()].with_category(label),
                matched_object: Some(o),
            });
        }
    }
    for _ in 0..rng.random_range(0..=3) {
        out.push(ScoredPrediction {
            score: score(rng),
            assigned_label: 0,
            bbox: boxes[rng.random_range(0..boxes.len())],
            matched_object: None,
        });
    }
    // interleave so report order does not follow input order
    for i in (1..out.len()).rev() {
        let j = rng.random_range(0..=i);
        out.swap(i, j);
    }
    out
}

/// Exact comparison of the library's failure set with the brute-force one.
pub fn failures_agree(preds: &[ScoredPrediction]) -> bool {
    let got = mkl_core::negatives::detect_failures(preds).expect("valid predictions");
    let (fns, fps) = brute_force_failures(preds);
    let got_fns: Vec<(usize, f64)> = got.false_negatives.iter().map(|f| (f.object, f.gap)).collect();
    let got_fps: Vec<(BoundingBox, usize, f64)> = got
        .false_positives
        .iter()
        .map(|f| (f.bbox, f.category, f.gap))
        .collect();
    got_fns == fns && got_fps == fps
}
