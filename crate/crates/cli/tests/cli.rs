use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scenekg"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn scenekg")
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Generates a small dataset over the mini KG and trains on it.
fn trained(dir: &Path, seed: &str) -> PathBuf {
    let kg = fixture("mini_kg.json");
    let data = dir.join("data");
    let out = run(&[
        "generate",
        "--kg",
        p(&kg),
        "--out",
        p(&data),
        "--scenes",
        "200",
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ck = dir.join(format!("ck-{seed}.json"));
    let out = run(&[
        "train",
        p(&data.join("manifest.jsonl")),
        "--kg",
        p(&kg),
        "--checkpoint",
        p(&ck),
        "--epochs",
        "8",
        "--seed",
        seed,
    ]);
    let report = ok_json(&out);
    assert!(report["accuracy"].as_f64().unwrap() >= 0.9, "{report}");
    ck
}

#[test]
fn ingest_builds_spatial_edges() {
    let v = ok_json(&run(&["ingest", p(&fixture("stove_sink.json"))]));
    let nodes = v["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 2);
    assert_eq!(nodes[0]["label"], "stove");
    let kinds: Vec<&str> = v["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["relation"].as_str().unwrap())
        .collect();
    assert!(kinds.contains(&"left-of"), "{kinds:?}");
    assert!(kinds.contains(&"right-of"), "{kinds:?}");
}

#[test]
fn ingest_reports_unknown_labels_against_kg() {
    let v = ok_json(&run(&[
        "ingest",
        p(&fixture("kitchen.json")),
        "--kg",
        p(&fixture("mini_kg.json")),
    ]));
    assert_eq!(v["unknown_labels"], serde_json::json!([]));
}

#[test]
fn malformed_detections_exit_2_with_offset() {
    let out = run(&["ingest", p(&fixture("malformed.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("byte offset"), "{}", stderr(&out));
}

#[test]
fn confidence_filter_can_empty_the_scene() {
    let out = run(&[
        "ingest",
        p(&fixture("stove_sink.json")),
        "--min-confidence",
        "0.95",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("empty scene"), "{}", stderr(&out));
}

#[test]
fn missing_kg_file_is_an_input_error() {
    let out = run(&[
        "ingest",
        p(&fixture("stove_sink.json")),
        "--kg",
        "/nonexistent/kg.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_flag_value_is_a_usage_error() {
    let out = run(&[
        "infer",
        p(&fixture("kitchen.json")),
        "--kg",
        "x",
        "--checkpoint",
        "y",
        "--gamma",
        "abc",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_kg_is_loadable_json() {
    let v = ok_json(&run(&["default-kg"]));
    assert_eq!(v["version"], "kg/1");
    let mini = ok_json(&run(&["default-kg", "--mini"]));
    let on_disk: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("mini_kg.json")).unwrap()).unwrap();
    assert_eq!(mini, on_disk);
}

#[test]
fn train_is_reproducible_and_infer_explains() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(dir.path(), "7");
    let b = trained(dir.path(), "7");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let kg = fixture("mini_kg.json");
    let v = ok_json(&run(&[
        "infer",
        p(&fixture("kitchen.json")),
        "--kg",
        p(&kg),
        "--checkpoint",
        p(&a),
    ]));
    assert_eq!(v["prediction"], "kitchen");
    assert!(v.get("trace").is_none());
    assert!(v["scores"]["kitchen"].is_number());

    let v = ok_json(&run(&[
        "infer",
        p(&fixture("kitchen.json")),
        "--kg",
        p(&kg),
        "--checkpoint",
        p(&a),
        "--explain",
    ]));
    let rounds = v["trace"].as_array().unwrap();
    assert!(!rounds.is_empty());
    for r in rounds {
        for key in [
            "seed",
            "initial_active",
            "iterations",
            "final_active",
            "halt",
            "scores",
        ] {
            assert!(r.get(key).is_some(), "round missing {key}: {r}");
        }
        for it in r["iterations"].as_array().unwrap() {
            assert!(
                it["added"].as_array().unwrap().len()
                    <= it["frontier_size"].as_u64().unwrap() as usize
            );
        }
    }
    let finals: Vec<&str> = rounds
        .iter()
        .flat_map(|r| r["final_active"].as_array().unwrap())
        .map(|n| n.as_str().unwrap())
        .collect();
    for sg in ["sg:0:stove", "sg:1:sink", "sg:2:fridge"] {
        assert!(finals.contains(&sg), "{sg} not covered");
    }

    for mode in ["object-level", "image-level"] {
        let data = dir.path().join("data/manifest.jsonl");
        let out = run(&[
            "eval",
            p(&data),
            "--kg",
            p(&kg),
            "--checkpoint",
            p(&a),
            "--mode",
            mode,
        ]);
        let m = ok_json(&out);
        assert_eq!(m["total"], 200);
        assert!(m["per-round-iteration-histogram"].is_object());
    }

    let full_kg = dir.path().join("full.json");
    std::fs::write(&full_kg, run(&["default-kg"]).stdout).unwrap();
    let out = run(&[
        "infer",
        p(&fixture("kitchen.json")),
        "--kg",
        p(&full_kg),
        "--checkpoint",
        p(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr(&out).contains("checkpoint/KG mismatch"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn baseline_is_exact_on_clean_compound_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let kg = dir.path().join("kg.json");
    std::fs::write(&kg, run(&["default-kg"]).stdout).unwrap();
    let data = dir.path().join("clean");
    let out = run(&[
        "generate",
        "--kg",
        p(&kg),
        "--out",
        p(&data),
        "--scenes",
        "100",
        "--sigma",
        "0",
        "--distractors",
        "0",
        "--background-fraction",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let m = ok_json(&run(&[
        "eval",
        p(&data.join("manifest.jsonl")),
        "--kg",
        p(&kg),
        "--baseline",
        "kg",
    ]));
    assert_eq!(m["accuracy"], 1.0, "{m}");
}
