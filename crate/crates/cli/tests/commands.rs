use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn viewsift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_viewsift"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = viewsift(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, clean: usize, distractors: usize, extra: &[&str]) -> String {
    let out = dir.to_str().unwrap();
    let (c, d) = (clean.to_string(), distractors.to_string());
    let mut args = vec!["synth", "--clean", &c, "--distractors", &d, "--seed", "3", "--out", out];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("manifest.json").to_str().unwrap().to_string()
}

fn read_json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "{stderr}");
    serde_json::from_str(stderr.trim_end()).unwrap()
}

#[test]
fn select_excludes_every_synthetic_distractor() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 8, 6, &[]);
    let out = dir.path().join("sel");
    ok(&[
        "select",
        "--manifest",
        &manifest,
        "--probe",
        "feature",
        "--tau",
        "0.65",
        "--out",
        out.to_str().unwrap(),
    ]);

    let order = read_json(out.join("work_order.json"));
    let kept: Vec<&str> = order["kept"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    assert_eq!(kept.len(), 8);
    assert!(kept.iter().all(|id| id.starts_with('c')));
    assert_eq!(order["anchor"], "c000");
    assert_eq!(order["probe"], "feature");
    assert_eq!(order["tau"], 0.65);

    let sel = read_json(out.join("selection.json"));
    assert_eq!(sel["counts"]["distractors_rejected"], 6);
    assert_eq!(sel["config"]["tau"], 0.65);
}

#[test]
fn attention_select_agrees_with_the_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 5, 5, &[]);
    let out = dir.path().join("sel");
    ok(&[
        "select",
        "--manifest",
        &manifest,
        "--probe",
        "attention",
        "--out",
        out.to_str().unwrap(),
    ]);
    let order = read_json(out.join("work_order.json"));
    assert_eq!(order["kept"].as_array().unwrap().len(), 5);
    assert_eq!(order["tau"], 0.05);
}

#[test]
fn score_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 6, 4, &[]);
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let run = Command::new(env!("CARGO_BIN_EXE_viewsift"))
            .args([
                "score",
                "--manifest",
                &manifest,
                "--probe",
                "fused",
                "--alpha",
                "0.3",
                "--out",
                out.to_str().unwrap(),
            ])
            .env("VIEWSIFT_THREADS", threads)
            .output()
            .unwrap();
        assert!(run.status.success());
        (
            std::fs::read(out.join("scores.csv")).unwrap(),
            read_json(out.join("scores.meta.json")),
        )
    };
    let (a, meta) = run("a", "1");
    let (b, _) = run("b", "4");
    assert_eq!(a, b);
    assert_eq!(meta["score"]["probe"], "fused");
    assert_eq!(meta["score"]["alpha"], 0.3);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 11);
}

#[test]
fn eth3d_large_trials_have_44_views() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("pool"), 14, 30, &[]);
    let out = dir.path().join("run");
    ok(&[
        "trials",
        "--manifest",
        &manifest,
        "--profile",
        "eth3d",
        "--level",
        "large",
        "--trials",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    for t in 0..3 {
        let r = read_json(out.join(format!("trials/large_{t:03}.json")));
        assert_eq!(r["order"].as_array().unwrap().len(), 44);
        assert_eq!(r["level"]["n_clean"], 14);
        assert_eq!(r["level"]["n_noise"], 30);
        assert_eq!(r["success_rate"], 1.0);
    }
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(
        summary.lines().nth(1).unwrap().starts_with("large,14,30,3,1,"),
        "{summary}"
    );
    assert_eq!(read_json(out.join("summary.meta.json"))["config"]["profile"], "eth3d");
}

#[test]
fn eval_of_exact_predictions_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 4, 2, &["--ground-truth"]);
    let pred = dir.path().join("set/predictions/manifest.json");
    let out = dir.path().join("eval");
    ok(&[
        "eval",
        "--manifest",
        &manifest,
        "--predictions",
        pred.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    let header = rows.headers().unwrap().clone();
    let row = rows.records().next().unwrap().unwrap();
    let get = |name: &str| {
        row[header.iter().position(|h| h == name).unwrap()]
            .parse::<f64>()
            .unwrap()
    };
    assert!(get("ATE") < 1e-5);
    assert!(get("AbsRel") < 1e-5);
    assert_eq!(get("delta125"), 1.0);
    assert_eq!(get("coverage"), 1.0);
}

#[test]
fn probe_writes_one_row_per_layer() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 4, 3, &[]);
    let out = dir.path().join("probe");
    ok(&["probe", "--manifest", &manifest, "--out", out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(out.join("layer_gap.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(read_json(out.join("layer_gap.meta.json"))["best_layer"], 23);
}

#[test]
fn failures_are_single_line_json() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth(&dir.path().join("set"), 3, 2, &[]);

    let e = error_line(&viewsift(&[
        "select",
        "--manifest",
        &manifest,
        "--probe",
        "feature",
        "--alpha",
        "0.5",
    ]));
    assert_eq!(e["error"], "usage");
    assert!(e["message"].as_str().unwrap().contains("alpha"));

    let e = error_line(&viewsift(&["frobnicate"]));
    assert_eq!(e["error"], "usage");

    let e = error_line(&viewsift(&["score", "--manifest", "/nonexistent/m.json"]));
    assert_eq!(e["error"], "manifest");

    let e = error_line(&viewsift(&["select", "--manifest", &manifest, "--anchor", "nobody"]));
    assert_eq!(e["error"], "scoring");

    let out = Command::new(env!("CARGO_BIN_EXE_viewsift"))
        .args(["synth", "--out", dir.path().join("x").to_str().unwrap()])
        .env("VIEWSIFT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(error_line(&out)["error"], "usage");

    assert!(viewsift(&["--help"]).status.success());
}
