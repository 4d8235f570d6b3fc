use std::path::Path;
use std::process::{Command, Output};

use zoomnet_core::corpus::Annotations;
use zoomnet_core::gradcheck::small_network_config;
use zoomnet_core::train::RunConfig;

fn zoomnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zoomnet")).args(args).output().unwrap()
}

fn error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(err.lines().last().unwrap()).unwrap()
}

fn small_corpus(dir: &Path) -> String {
    let cfg = dir.join("scene.kv");
    std::fs::write(
        &cfg,
        "height = 64\nwidth = 64\nsize_range = 10, 48\ntrain_images = 3\ncal_images = 2\neval_images = 3\n",
    )
    .unwrap();
    let out = dir.join("corpus");
    let o = zoomnet(&["gen", "--config", cfg.to_str().unwrap(), "--seed", "4", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

#[test]
fn gen_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (small_corpus(a.path()), small_corpus(b.path()));
    assert!(x.starts_with("corpus_sha256 "));
    assert_eq!(x, y);
}

#[test]
fn perfect_proposals_score_full_recall() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let ann_path = dir.path().join("corpus/eval/annotations.json");
    let ann = Annotations::load(&ann_path).unwrap();
    let mut jsonl = String::new();
    for (id, boxes) in ann.boxes_by_image() {
        let rows: Vec<[f64; 5]> = boxes.iter().map(|b| [b.x1, b.y1, b.x2, b.y2, 1.0]).collect();
        jsonl += &serde_json::json!({ "image_id": id, "boxes": rows }).to_string();
        jsonl.push('\n');
    }
    let props = dir.path().join("perfect.jsonl");
    std::fs::write(&props, jsonl).unwrap();
    let report = dir.path().join("report");
    let o = zoomnet(&["eval", props.to_str().unwrap(), ann_path.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["ar"]["AR@10"], 1.0);
    assert_eq!(r["ar"]["AR@1000"], 1.0);
    assert!(report.join("recall_grid.csv").exists() && report.join("curves.txt").exists());
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.kv");
    std::fs::write(&cfg, "height = 64\nhieght = 64\n").unwrap();
    let o = zoomnet(&["gen", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "unknown_key");
    assert!(e["message"].as_str().unwrap().contains("hieght"));
}

#[test]
fn usage_errors_exit_2() {
    let o = zoomnet(&["ablate", "zip-everything", "--corpus", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "usage");
    let o = zoomnet(&["eval", "/nonexistent/p.jsonl", "/nonexistent/a.json", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(error_line(&o)["error"], "missing_file");
}

#[test]
fn train_then_propose_writes_ranked_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path());
    let mut rc = RunConfig { model: small_network_config(), ..RunConfig::default() };
    rc.train.steps = 3;
    rc.train.log_every = 0;
    let cfg = dir.path().join("run.kv");
    std::fs::write(&cfg, rc.to_kv()).unwrap();
    let (corpus, run) = (dir.path().join("corpus"), dir.path().join("run"));
    let o = zoomnet(&[
        "train", "--config", cfg.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(),
        "--out", run.to_str().unwrap(), "--scales", "64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.ckpt", "config.kv", "train_log.csv", "calibration.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let props = dir.path().join("p.jsonl");
    let o = zoomnet(&[
        "propose", "--checkpoint", run.to_str().unwrap(), "--corpus", corpus.to_str().unwrap(),
        "--out", props.to_str().unwrap(), "--budget", "20",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&props).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let scores: Vec<f64> = v["boxes"].as_array().unwrap().iter().map(|b| b[4].as_f64().unwrap()).collect();
        assert!(scores.len() <= 20);
        assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    }
}
