use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "data": {"n_per_class": 10, "num_classes": 4},
  "toycnn": {"channels": [8, 16, 32, 64], "hidden": 64},
  "pretrain": {"epochs": 2},
  "schedule": {"epochs": 1, "batch_size": 8},
  "lr_grid": [0.1],
  "rise": {"masks": 10, "batch": 10},
  "evaluation": {"max_images": 6, "road_percentages": [50.0]},
  "sanity": {"images": 3, "seeds": [0], "heatmaps": 1},
  "ablation": {"variants": ["no-skip", "one-layer"], "swapped_masking": false}
}"#;

fn ttame(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttame"))
        .arg("--config")
        .arg(dir.join("tiny.json"))
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("TTAME_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> serde_json::Value {
    let out = ttame(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON report")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    ok(dir.path(), &["gen-data"]);
    ok(dir.path(), &["train-backbone", "--backbone", "toycnn"]);
    dir
}

#[test]
fn full_command_sequence() {
    let dir = setup();
    let d = dir.path();
    let report = ok(d, &["train-explainer", "--backbone", "toycnn"]);
    assert_eq!(report["trials"].as_array().unwrap().len(), 1);

    let report = ok(d, &["explain", "--backbone", "toycnn", "--image", "0"]);
    assert_eq!(report["class"], report["predicted"]);
    let pgm = fs::read(report["heatmap"].as_str().unwrap()).unwrap();
    assert!(pgm.starts_with(b"P5\n14 14\n255\n"));
    let report = ok(d, &["explain", "--backbone", "toycnn", "--explainer", "gradcam", "--image", "0", "--class", "3"]);
    assert_eq!(report["class"], 3);

    ok(d, &["evaluate", "--backbone", "toycnn"]);
    let csv = fs::read_to_string(d.join("out/metrics_toycnn_ttame.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6, "{csv}");

    let rows =
        ok(d, &["evaluate", "--backbone", "toycnn", "--explainer", "rise", "--measures", "adic,road", "--v", "50"]);
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert!(d.join("out/curves_toycnn_rise.csv").exists());

    let rows = ok(d, &["sanity", "--backbone", "toycnn"]);
    assert!(!rows.as_array().unwrap().is_empty());
    assert!(d.join("out/sanity/toycnn").read_dir().unwrap().count() > 0);

    let rows = ok(d, &["ablate", "--backbone", "toycnn", "--swapped-masking"]);
    assert_eq!(rows.as_array().unwrap().len(), 3 * 6);
    let csv = fs::read_to_string(d.join("out/ablation_toycnn.csv")).unwrap();
    assert!(csv.contains("ttame:full+swapped-masking"));
}

#[test]
fn failures_report_json_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let out = ttame(dir.path(), &["train-backbone", "--backbone", "toycnn"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("dataset"));

    let out = ttame(dir.path(), &["train-backbone", "--backbone", "resnet"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    fs::write(dir.path().join("tiny.json"), r#"{"loss": {"lambda4": 2}}"#).unwrap();
    let out = ttame(dir.path(), &["gen-data"]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "invalid_argument");
}

#[test]
fn data_directory_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    let data = dir.path().join("shared");
    let out = Command::new(env!("CARGO_BIN_EXE_ttame"))
        .args(["--config", dir.path().join("tiny.json").to_str().unwrap(), "gen-data"])
        .arg("--out")
        .arg(dir.path().join("out"))
        .env("TTAME_DATA_DIR", &data)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(data.join("dataset.ttds").exists());
    assert!(!dir.path().join("out/dataset.ttds").exists());
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup();
    let b = setup();
    for d in [a.path(), b.path()] {
        ok(d, &["evaluate", "--backbone", "toycnn", "--explainer", "gradcam"]);
    }
    for f in ["dataset.ttds", "toycnn.ttpm", "toycnn_pretrain.csv", "metrics_toycnn_gradcam.csv"] {
        assert_eq!(
            fs::read(a.path().join("out").join(f)).unwrap(),
            fs::read(b.path().join("out").join(f)).unwrap(),
            "{f}"
        );
    }
}
