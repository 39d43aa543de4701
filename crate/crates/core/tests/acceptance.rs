//! Acceptance run: one PASS/FAIL line per primary criterion. Exits non-zero
//! when any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use mkl_core::annotations::{load_dataset, load_hierarchy, BoundingBox, CategoryTable, Hierarchy, SceneAnnotation};
use mkl_core::gradcheck::{run_gradcheck, GradcheckConfig};
use mkl_core::mi::{self, FeatureBatch, FeatureRole, NegativeSharing};
use mkl_core::negatives::{
    build_negative_set, detect_failures, load_scores, FailureSet, FalseNegative, NegativeKind,
};
use mkl_core::prompting::{load_templates, parse_templates, Renderer};
use mkl_core::seeds;
use mkl_core::training::{
    default_templates, generate_synthetic, mean_metric, train, SyntheticConfig, TrainConfig,
    TrainReport,
};
use ndarray::{array, s, Array2};
use rand::seq::SliceRandom;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn vg(m: Array2<f64>) -> FeatureBatch {
    FeatureBatch::new(FeatureRole::VisualGlobal, m).unwrap()
}

fn lg(m: Array2<f64>) -> FeatureBatch {
    FeatureBatch::new(FeatureRole::LinguisticGlobal, m).unwrap()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = run_gradcheck(&GradcheckConfig::new(0)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut parts = Vec::new();
    for c in &report.checks {
        check(c.instances >= 50, format!("{} ran {} instances", c.loss, c.instances))?;
        check(c.passed, format!("{} max rel error {:.3e}", c.loss, c.max_rel_error))?;
        parts.push(format!("{} {:.1e}", c.loss, c.max_rel_error));
    }
    check(report.stability.all_finite, "non-finite loss at tau = 1e-8")?;
    check(elapsed < Duration::from_secs(30), format!("took {elapsed:?}"))?;
    Ok(format!("{} in {:.1?}", parts.join(", "), elapsed))
}

fn closed_form_fixtures() -> Outcome {
    let one_v = vg(array![[0.6, 0.8]]);
    let one_l = lg(array![[0.0, 1.0]]);
    check(mi::infonce_visual(&one_v, &one_l, 0.07).unwrap().value == 0.0, "N = 1 visual")?;
    check(mi::infonce_text(&one_l, &one_v, 0.07).unwrap().value == 0.0, "N = 1 text")?;

    let mut worst: f64 = 0.0;
    for n in [2, 4, 7, 32] {
        let flat_v = vg(Array2::from_elem((n, 1), 1.0));
        let flat_l = lg(Array2::from_elem((n, 1), 1.0));
        for value in [
            mi::infonce_visual(&flat_v, &flat_l, 0.07).unwrap().value,
            mi::infonce_text(&flat_l, &flat_v, 0.07).unwrap().value,
        ] {
            worst = worst.max((value - (n as f64).ln()).abs());
        }
    }
    check(worst < 1e-12, format!("uniform similarity off by {worst:e}"))?;

    let e = Array2::<f64>::eye(2);
    let naive = common::naive_infonce(&rows(&e), &rows(&e), &[], 1.0);
    let got = mi::infonce_visual(&vg(e.clone()), &lg(e.clone()), 1.0).unwrap().value;
    let got_t = mi::infonce_text(&lg(e.clone()), &vg(e.clone()), 1.0).unwrap().value;
    check((got - naive).abs() < 1e-12, format!("orthonormal pair {got} vs {naive}"))?;
    check((got_t - naive).abs() < 1e-12, "orthonormal pair, text side")?;
    let closed = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
    check((naive - closed).abs() < 1e-12, "naive evaluator disagrees with -ln(e/(e+1))")?;

    let h = FeatureBatch::new(FeatureRole::HardNegative, array![[1.0, 0.0]]).unwrap();
    let same = mi::infonce_hard(&vg(array![[1.0, 0.0]]), &lg(array![[1.0, 0.0]]), &[h], 1.0, NegativeSharing::PerImage)
        .unwrap()
        .value;
    check((same - 2f64.ln()).abs() < 1e-12, "hard negative equal to the positive")?;
    Ok(format!("orthonormal pair = {got:.16}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = common::rng(2024);
    let trials = 10_000;
    for t in 0..trials {
        let preds = common::random_predictions(&mut rng);
        check(common::failures_agree(&preds), format!("score matrix {t} disagrees"))?;
    }

    // priority fixture: object 0 missed, background proposal scored as cat
    let (data, _) = load_dataset(common::fixture("coco_one_image.json")).map_err(|e| e.to_string())?;
    let templates = load_templates(common::fixture("templates_cq.tsv")).unwrap();
    let hierarchy = load_hierarchy(common::fixture("hierarchy.tsv"), &data.categories).unwrap();
    let scores = load_scores(common::fixture("scores_priority.jsonl")).unwrap();
    let renderer = Renderer::new(&templates, &data.categories).unwrap();
    let scene = &data.scenes[0];
    let anchor = renderer.describe(scene, seeds::image_seed(7, 1)).unwrap();
    let failures = detect_failures(&scores[0].to_predictions()).unwrap();
    check(failures.false_negative_objects() == vec![0], "fixture FN set")?;
    check(
        failures.false_positives.len() == 1 && failures.false_positives[0].category == 3,
        "fixture FP set",
    )?;
    let set = build_negative_set(scene, &anchor, &failures, &hierarchy, &renderer, 5, seeds::negative_seed(7, 1))
        .unwrap();
    use NegativeKind::*;
    check(
        set.kinds == [RemoveFn, InsertFp, ConfuseCategory, ConfuseCategory, ConfuseCategory],
        format!("kinds {:?}", set.kinds),
    )?;
    let sentences = |t: &str| {
        let mut v: Vec<String> = t.split('.').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        v.sort();
        v
    };
    let want = |v: &[&str]| {
        let mut v: Vec<String> = v.iter().map(|s| s.to_string()).collect();
        v.sort();
        v
    };
    check(sentences(&anchor.text) == want(&["There are two dogs", "There is one cat"]), "anchor text")?;
    check(sentences(&set.negatives[0].text) == want(&["There is one cat", "There is one dog"]), "remove_fn text")?;
    check(sentences(&set.negatives[1].text) == want(&["There are two cats", "There are two dogs"]), "insert_fp text")?;
    let confusions = [
        want(&["There is one cat", "There is one dog", "There is one wolf"]),
        want(&["There are three dogs"]),
        want(&["There are two dogs", "There is one wolf"]),
    ];
    for d in &set.negatives[2..] {
        check(confusions.contains(&sentences(&d.text)), format!("confusion {:?}", d.text))?;
    }

    // {dog, cat}, dog missed, one negative: the dog disappears
    let table = CategoryTable::from_names(&[("dog", None), ("wolf", None), ("cat", None)]);
    let h = Hierarchy::from_pairs(&table, &[("dog", "canine"), ("wolf", "canine"), ("cat", "feline")]).unwrap();
    let cq = parse_templates("cq\tCATEGORY,QUANTITY\tThere {is|are} {QUANTITY} {CATEGORY}\t\n").unwrap();
    let r = Renderer::new(&cq, &table).unwrap();
    let two = SceneAnnotation::new(5, 100, 100).with_boxes(vec![
        BoundingBox::new(10.0, 10.0, 20.0, 20.0, 1),
        BoundingBox::new(60.0, 60.0, 20.0, 20.0, 3),
    ]);
    let fn_only = FailureSet {
        false_negatives: vec![FalseNegative { object: 0, gap: 0.3 }],
        false_positives: vec![],
    };
    let a = r.describe(&two, 1).unwrap();
    let set = build_negative_set(&two, &a, &fn_only, &h, &r, 1, 2).unwrap();
    check(set.negatives[0].text == "There is one cat.", format!("remove fixture {:?}", set.negatives[0].text))?;

    // {dog}, no failures: the only sibling replaces it
    let one = SceneAnnotation::new(6, 100, 100).with_boxes(vec![BoundingBox::new(10.0, 10.0, 20.0, 20.0, 1)]);
    let a = r.describe(&one, 1).unwrap();
    let set = build_negative_set(&one, &a, &FailureSet::default(), &h, &r, 1, 3).unwrap();
    check(set.negatives[0].text == "There is one wolf.", format!("sibling fixture {:?}", set.negatives[0].text))?;
    Ok(format!("{trials} score matrices and 3 negative fixtures agree"))
}

#[derive(Clone, Copy)]
enum Mode {
    None,
    Image,
    Object,
    Full,
}

fn run_mode(mode: Mode, seed: u64) -> TrainReport {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    match mode {
        Mode::None => {
            cfg.enable_image_level = false;
            cfg.enable_object_level = false;
            cfg.enable_hard_negatives = false;
        }
        Mode::Image => {
            cfg.enable_object_level = false;
            cfg.enable_hard_negatives = false;
        }
        Mode::Object => cfg.enable_hard_negatives = false,
        Mode::Full => {}
    }
    let data = generate_synthetic(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    train(&data, &default_templates(&cfg), &data.hierarchy, &cfg).unwrap().report
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn toy_run(full: &mut Vec<TrainReport>) -> Outcome {
    let start = Instant::now();
    *full = SEEDS.iter().map(|&s| run_mode(Mode::Full, s)).collect();
    let elapsed = start.elapsed();
    let retrieval = mean_metric(full, |r| r.retrieval_top1);
    let alignment = mean_metric(full, |r| r.object_alignment_top1);
    let chance = mean_metric(full, |r| r.initial().retrieval_top1);
    let detail = format!(
        "retrieval {retrieval:.4} (from {chance:.4}), alignment {alignment:.4}, {:.0?} for 5 seeds",
        elapsed
    );
    check(retrieval >= 0.90, format!("retrieval below 0.90: {detail}"))?;
    check(alignment >= 0.95, format!("alignment below 0.95: {detail}"))?;
    check(elapsed < Duration::from_secs(300), format!("too slow: {detail}"))?;
    Ok(detail)
}

fn ablation(full: &[TrainReport]) -> Outcome {
    check(full.len() == SEEDS.len(), "full runs missing")?;
    let runs = |m: Mode| -> Vec<TrainReport> { SEEDS.iter().map(|&s| run_mode(m, s)).collect() };
    let none = runs(Mode::None);
    let image = runs(Mode::Image);
    let object = runs(Mode::Object);
    let ret = |r: &[TrainReport]| mean_metric(r, |x| x.retrieval_top1);
    let ali = |r: &[TrainReport]| mean_metric(r, |x| x.object_alignment_top1);
    let conf = |r: &[TrainReport]| mean_metric(r, |x| x.sibling_confusion_rate);
    let both = |r: &[TrainReport]| ret(r) + ali(r);
    let detail = format!(
        "retrieval none {:.3} < image {:.3}; alignment image {:.3} < object {:.3}; \
         retrieval+alignment {:.3} < {:.3} < {:.3}; confusion full {:.4} < no-HN {:.4}",
        ret(&none),
        ret(&image),
        ali(&image),
        ali(&object),
        both(&none),
        both(&image),
        both(&object),
        conf(full),
        conf(&object)
    );
    check(both(&none) < both(&image) && both(&image) < both(&object), detail.clone())?;
    check(ret(&none) < ret(&image), detail.clone())?;
    check(ali(&image) < ali(&object), detail.clone())?;
    check(conf(full) < conf(&object), detail.clone())?;
    Ok(detail)
}

fn determinism() -> Outcome {
    let ann = common::fixture("coco_two_images.json");
    let hier = common::fixture("hierarchy.tsv");
    let scores = common::fixture("scores_priority.jsonl");
    let (ann, hier, scores) = (ann.to_str().unwrap(), hier.to_str().unwrap(), scores.to_str().unwrap());
    for seed in ["0", "17", "123456789"] {
        let mut describe = Vec::new();
        let mut negatives = Vec::new();
        for workers in ["1", "1", "2", "4"] {
            let d = common::mkl(&["describe", "--annotations", ann, "--seed", seed, "--workers", workers]);
            check(d.status.success(), common::stderr(&d))?;
            describe.push(d.stdout);
            let n = common::mkl(&[
                "negatives", "--annotations", ann, "--hierarchy", hier, "--scores", scores, "--seed", seed,
                "--workers", workers,
            ]);
            check(n.status.success(), common::stderr(&n))?;
            negatives.push(n.stdout);
        }
        check(describe.windows(2).all(|w| w[0] == w[1]), format!("describe output differs (seed {seed})"))?;
        check(negatives.windows(2).all(|w| w[0] == w[1]), format!("negatives output differ (seed {seed})"))?;
    }

    // sharded features gathered by rank give the undivided loss exactly
    let mut rng = common::rng(99);
    let d = 8;
    let v = common::to_array(&common::unit_rows(&mut rng, 4, d), d);
    let l = common::to_array(&common::unit_rows(&mut rng, 4, d), d);
    let whole = mi::infonce_visual(&vg(v.clone()), &lg(l.clone()), 0.07).unwrap().value;
    let shards = [vg(v.slice(s![2.., ..]).to_owned()), vg(v.slice(s![..2, ..]).to_owned())];
    let gathered = mi::gather_features(&shards, &[1, 0]).unwrap();
    let split = mi::infonce_visual(&gathered, &lg(l.clone()), 0.07).unwrap().value;
    check(whole.to_bits() == split.to_bits(), "gathered shards change the loss")?;

    let mut worst: f64 = 0.0;
    for t in 0..500u64 {
        let mut rng = common::rng(5000 + t);
        let n = 2 + (t as usize % 30);
        let fv = common::batch(FeatureRole::VisualGlobal, &common::unit_rows(&mut rng, n, d), d);
        let fl = common::batch(FeatureRole::LinguisticGlobal, &common::unit_rows(&mut rng, n, d), d);
        let negs: Vec<FeatureBatch> = (0..n)
            .map(|_| common::batch(FeatureRole::HardNegative, &common::unit_rows(&mut rng, 2, d), d))
            .collect();
        let cats = common::batch(FeatureRole::LinguisticCategory, &common::unit_rows(&mut rng, 5, d), d);
        let objs = common::batch(FeatureRole::VisualObject, &common::unit_rows(&mut rng, n, d), d);
        let labels: Vec<usize> = (0..n).map(|i| 1 + i % 4).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let (pv, pl, po) = (fv.permuted(&perm), fl.permuted(&perm), objs.permuted(&perm));
        let pnegs: Vec<FeatureBatch> = perm.iter().map(|&i| negs[i].clone()).collect();
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let tau = 0.07;
        let pairs = [
            (
                mi::infonce_visual(&fv, &fl, tau).unwrap().value,
                mi::infonce_visual(&pv, &pl, tau).unwrap().value,
            ),
            (
                mi::infonce_text(&fl, &fv, tau).unwrap().value,
                mi::infonce_text(&pl, &pv, tau).unwrap().value,
            ),
            (
                mi::infonce_hard(&fv, &fl, &negs, tau, NegativeSharing::PerImage).unwrap().value,
                mi::infonce_hard(&pv, &pl, &pnegs, tau, NegativeSharing::PerImage).unwrap().value,
            ),
            (
                mi::infonce_object(&objs, &cats, &labels, tau).unwrap().value,
                mi::infonce_object(&po, &cats, &plabels, tau).unwrap().value,
            ),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst < 1e-9, format!("permutation changed a loss by {worst:e}"))?;
    Ok(format!("CLI outputs identical over 3 seeds x 4 runs; max permutation drift {worst:.1e}"))
}

fn main() {
    let mut failed = 0;
    let mut full = Vec::new();
    let mut report = |name: &str, outcome: std::thread::Result<Outcome>| {
        let line = match outcome {
            Ok(Ok(detail)) => format!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                format!("FAIL {name}: {why}")
            }
            Err(_) => {
                failed += 1;
                format!("FAIL {name}: panicked")
            }
        };
        println!("{line}");
    };
    report("gradient suite", catch_unwind(gradient_suite));
    report("closed-form fixtures", catch_unwind(closed_form_fixtures));
    report("oracle equivalence", catch_unwind(oracle_equivalence));
    report("toy MKL run", catch_unwind(AssertUnwindSafe(|| toy_run(&mut full))));
    report("ablation direction", catch_unwind(AssertUnwindSafe(|| ablation(&full))));
    report("determinism", catch_unwind(determinism));
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
