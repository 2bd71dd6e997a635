use std::path::Path;
use std::process::{Command, Output};

fn csm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csm")).args(args).output().expect("spawn csm")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const GEN: &str = r#"{"num_concepts": 4, "num_images": 40, "num_queries": 80, "image_size": 16, "judged_pool_size": 20}"#;

const TRAIN: &str = r#"{
  "batch_size_queries": 16,
  "max_epochs": 2,
  "init": {"scheme": "he"},
  "norm_scope": "per_layer",
  "norm_radius": 5.0,
  "network": {
    "input_shape": [3, 16, 16],
    "layers": [
      {"kind": "conv", "out_channels": 4, "kernel": 3, "padding": 1},
      {"kind": "max_pool", "window": 2, "stride": 2},
      {"kind": "fully_connected", "out_dim": 6, "relu": false}
    ]
  }
}"#;

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gen.json"), GEN).unwrap();
    std::fs::write(d.join("train.json"), TRAIN).unwrap();
    let data = d.join("data");

    let o = csm(&["gen-data", "--config", p(&d.join("gen.json")), "--seed", "3", "--out", p(&data)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(data.join("images").join("000000.ten").exists());

    let model = d.join("m.csm");
    let o = csm(&["train", "--data", p(&data), "--config", p(&d.join("train.json")), "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let history = std::fs::read_to_string(d.join("m.csm.history.jsonl")).unwrap();
    assert!(history.lines().count() >= 2);

    let index = d.join("m.idx");
    let o = csm(&["index", "--model", p(&model), "--images", p(&data.join("images")), "--out", p(&index)]);
    assert_eq!(code(&o), 0, "{}", text(&o));

    let query = std::fs::read_to_string(data.join("queries.tsv")).unwrap();
    let first = query.lines().find(|l| !l.starts_with('#')).unwrap().split('\t').nth(1).unwrap().to_string();
    let o = csm(&["search", "--model", p(&model), "--index", p(&index), "--query", &first, "--k", "5"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 5);
    let again = csm(&["search", "--model", p(&model), "--index", p(&index), "--query", &first, "--k", "5"]);
    assert_eq!(o.stdout, again.stdout);

    let o = csm(&["search", "--model", p(&model), "--index", p(&index), "--query", "zzzz", "--k", "3", "--json"]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["oov"], true);

    let report = d.join("report.json");
    let o = csm(&[
        "evaluate", "--model", p(&model), "--index", p(&index), "--judgments", p(&data.join("judgments.tsv")), "--out", p(&report),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    let out = d.join("analysis");
    let o = csm(&["report", "--eval", p(&report), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    for f in ["analysis.json", "dcg_by_length.svg", "match_types.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("t.json"), TRAIN).unwrap();
    let o = csm(&["gradcheck", "--config", p(&dir.path().join("t.json"))]);
    assert_eq!(code(&o), 0, "{}", text(&o));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&csm(&["frobnicate"])), 1);
    assert_eq!(code(&csm(&["search", "--model", "x"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"num_images": "many"}"#).unwrap();
    assert_eq!(code(&csm(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])), 1);
    std::fs::write(&cfg, r#"{"num_images": 0}"#).unwrap();
    assert_eq!(code(&csm(&["gen-data", "--config", p(&cfg), "--out", p(&dir.path().join("o"))])), 1);
    assert_eq!(code(&csm(&["--help"])), 0);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(code(&csm(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m.csm"))])), 2);
    let junk = dir.path().join("junk.csm");
    std::fs::write(&junk, b"not a model").unwrap();
    let o = csm(&["index", "--model", p(&junk), "--images", p(dir.path()), "--out", p(&dir.path().join("i"))]);
    assert_eq!(code(&o), 2);
    assert!(text(&o).contains("magic"), "{}", text(&o));
}
