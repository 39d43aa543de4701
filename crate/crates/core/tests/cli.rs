mod common;

use std::collections::BTreeSet;
use std::fs;

use common::{fixture, mkl, stderr, stdout};
use mkl_core::negatives::NegativeRecord;
use mkl_core::prompting::DescriptionRecord;
use mkl_core::training::ToyDetector;

fn path(name: &str) -> String {
    fixture(name).to_string_lossy().into_owned()
}

fn sentences(text: &str) -> BTreeSet<String> {
    text.split('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn set(items: &[&str]) -> BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn negatives_records(out: &str) -> Vec<NegativeRecord> {
    out.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn describe_writes_one_record_per_image() {
    let o = mkl(&["describe", "--annotations", &path("coco_two_images.json"), "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines: Vec<DescriptionRecord> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].image_id, 1);
    assert_eq!(lines[1].image_id, 2);
    assert!(lines[1].text.contains("wolf"));
}

#[test]
fn describe_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (k, workers) in ["1", "1", "2", "4"].iter().enumerate() {
        let out = dir.path().join(format!("d{k}.jsonl"));
        let o = mkl(&[
            "describe",
            "--annotations",
            &path("coco_two_images.json"),
            "--seed",
            "11",
            "--workers",
            workers,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push(fs::read(&out).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let other = mkl(&["describe", "--annotations", &path("coco_two_images.json"), "--seed", "12"]);
    assert!(other.status.success());
}

#[test]
fn missing_template_file_is_an_io_error_naming_the_path() {
    let o = mkl(&[
        "describe",
        "--annotations",
        &path("coco_two_images.json"),
        "--templates",
        "/no/such/templates.tsv",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such/templates.tsv"));
}

#[test]
fn seed_is_mandatory() {
    let o = mkl(&["describe", "--annotations", &path("coco_two_images.json")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"));
}

#[test]
fn malformed_annotations_are_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"images": [{"id": 1, "width": 10, "height": 10}], "annotations": [{"id": 5, "image_id": 1, "category_id": 1, "bbox": [0, 0, 0, 3]}], "categories": [{"id": 1, "name": "dog"}]}"#).unwrap();
    let o = mkl(&["describe", "--annotations", bad.to_str().unwrap(), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains('5'), "{}", stderr(&o));
}

#[test]
fn one_image_gives_n_h_lines() {
    let o = mkl(&[
        "negatives",
        "--annotations",
        &path("coco_one_image.json"),
        "--hierarchy",
        &path("hierarchy.tsv"),
        "--no-scores",
        "--n-h",
        "5",
        "--seed",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = negatives_records(&stdout(&o));
    assert_eq!(recs.len(), 5);
    assert!(recs.iter().all(|r| r.image_id == 1));
}

#[test]
fn no_scores_gives_only_confusions() {
    let o = mkl(&[
        "negatives",
        "--annotations",
        &path("coco_two_images.json"),
        "--no-scores",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = negatives_records(&stdout(&o));
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().all(|r| r.kind.as_str() == "confuse_category"));
}

#[test]
fn priority_fixture_orders_kinds_and_texts() {
    let o = mkl(&[
        "negatives",
        "--annotations",
        &path("coco_one_image.json"),
        "--templates",
        &path("templates_cq.tsv"),
        "--hierarchy",
        &path("hierarchy.tsv"),
        "--scores",
        &path("scores_priority.jsonl"),
        "--seed",
        "7",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recs = negatives_records(&stdout(&o));
    let kinds: Vec<&str> = recs.iter().map(|r| r.kind.as_str()).collect();
    assert_eq!(
        kinds,
        ["remove_fn", "insert_fp", "confuse_category", "confuse_category", "confuse_category"]
    );
    // anchor: two dogs and one cat; object 0 (a dog) is missed, the
    // background proposal scores highest as cat
    assert_eq!(sentences(&recs[0].text), set(&["There is one cat", "There is one dog"]));
    assert_eq!(sentences(&recs[1].text), set(&["There are two cats", "There are two dogs"]));
    let confusions = [
        set(&["There is one cat", "There is one wolf", "There is one dog"]),
        set(&["There are three dogs"]),
        set(&["There is one wolf", "There are two dogs"]),
    ];
    for r in &recs[2..] {
        assert!(confusions.contains(&sentences(&r.text)), "{}", r.text);
    }
}

#[test]
fn orphan_score_records_are_listed() {
    let o = mkl(&[
        "negatives",
        "--annotations",
        &path("coco_two_images.json"),
        "--scores",
        &path("scores_orphan.jsonl"),
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("99"));
}

#[test]
fn scores_and_no_scores_conflict() {
    let o = mkl(&[
        "negatives",
        "--annotations",
        &path("coco_two_images.json"),
        "--scores",
        &path("scores_priority.jsonl"),
        "--no-scores",
        "--seed",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let o = mkl(&["negatives", "--annotations", &path("coco_two_images.json"), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn negatives_are_byte_identical_across_workers() {
    let run = |workers: &str| {
        let o = mkl(&[
            "negatives",
            "--annotations",
            &path("coco_two_images.json"),
            "--hierarchy",
            &path("hierarchy.tsv"),
            "--scores",
            &path("scores_priority.jsonl"),
            "--seed",
            "5",
            "--workers",
            workers,
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        o.stdout
    };
    let one = run("1");
    assert_eq!(one, run("1"));
    assert_eq!(one, run("2"));
}

#[test]
fn train_toy_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = mkl(&[
        "train-toy",
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "1",
        "--epochs",
        "2",
        "--scenes",
        "96",
        "--eval-scenes",
        "32",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("retrieval_top1="));
    let log = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let epochs: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 3);
    assert!(epochs[0].get("losses").is_none());
    assert!(epochs[2]["losses"]["total"].as_f64().unwrap().is_finite());
    let ckpt = fs::read(out.join("checkpoint.bin")).unwrap();
    let det = ToyDetector::from_bytes(&ckpt).unwrap();
    assert_eq!(det.global_encoder.d_out(), 64);
}

#[test]
fn train_toy_rejects_bad_tau() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkl(&[
        "train-toy",
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "1",
        "--tau",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("tau"));
}

#[test]
fn train_toy_divergence_is_numerical() {
    let dir = tempfile::tempdir().unwrap();
    let o = mkl(&[
        "train-toy",
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "1",
        "--epochs",
        "1",
        "--scenes",
        "64",
        "--eval-scenes",
        "32",
        "--lr",
        "1e308",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_by_default() {
    let o = mkl(&["gradcheck", "--seed", "0", "--instances", "10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    for name in ["infonce_visual", "infonce_text", "infonce_object", "infonce_hard", "projection_head", "stability"] {
        assert!(out.lines().any(|l| l.starts_with(name) && l.contains("PASS")), "{out}");
    }
}

#[test]
fn sabotaged_gradient_fails_naming_the_loss() {
    let o = mkl(&["gradcheck", "--seed", "0", "--instances", "5", "--sabotage", "infonce_object"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("infonce_object failed"), "{err}");
    assert!(err.contains("instance"));
    assert!(!err.contains("infonce_visual failed"));
}

#[test]
fn gradcheck_report_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("grad.json");
    let o = mkl(&["gradcheck", "--seed", "4", "--instances", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(v["checks"].as_array().unwrap().len(), 5);
    assert_eq!(v["stability"]["all_finite"], true);
}
