//! End-to-end runs of the binary: synth -> train -> evaluate ->
//! analyze-graph -> contributions -> label-sweep, plus exit-code and
//! determinism checks.

use std::path::Path;
use std::process::{Command, Output};

fn mmgl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_spec(dir: &Path) -> String {
    let spec = serde_json::json!({
        "n": 60,
        "modality_dims": [4, 3, 5],
        "num_classes": 2,
        "separation": 4.0,
        "noise": 0.5,
        "complementary": true,
        "seed": 9
    });
    let path = dir.join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("train.cfg");
    std::fs::write(
        &path,
        "d_f = 4\nd_h = 6\nd_g = 6\nepochs = 3\neval_every = 1\nbatch_size = 30\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn full_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let config = write_config(dir.path());
    let data_dir = dir.path().join("data");
    let data = data_dir.to_string_lossy().into_owned();
    let manifest = data_dir.join("manifest.json").to_string_lossy().into_owned();

    let out = mmgl(&["synth", "--spec", &spec, "--out", &data]);
    assert!(out.status.success(), "synth: {}", String::from_utf8_lossy(&out.stderr));
    assert!(data_dir.join("labels.csv").exists());

    let train_dir = dir.path().join("train");
    let out = mmgl(&[
        "train",
        "--dataset",
        &manifest,
        "--out",
        train_dir.to_str().unwrap(),
        "--config",
        &config,
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "train: {}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_dir.join("checkpoint.json");
    assert!(ckpt.exists());
    let history = std::fs::read_to_string(train_dir.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 4, "header + 3 epochs");

    let eval_dir = dir.path().join("eval");
    let out = mmgl(&[
        "evaluate",
        "--dataset",
        &manifest,
        "--out",
        eval_dir.to_str().unwrap(),
        "--folds",
        "2",
        "--config",
        &config,
        "--seed",
        "3",
    ]);
    assert!(out.status.success(), "evaluate: {}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["version"], 1);
    assert_eq!(metrics["per_fold"].as_array().unwrap().len(), 2);
    assert!(metrics["accuracy"]["mean"].as_f64().unwrap() >= 0.0);

    // Rerunning evaluate overwrites with identical bytes.
    let first = std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap();
    let out = mmgl(&[
        "evaluate",
        "--dataset",
        &manifest,
        "--out",
        eval_dir.to_str().unwrap(),
        "--folds",
        "2",
        "--config",
        &config,
        "--seed",
        "3",
    ]);
    assert!(out.status.success());
    let second = std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap();
    assert_eq!(first, second, "evaluate must be deterministic");

    let graph_dir = dir.path().join("graph");
    let out = mmgl(&[
        "analyze-graph",
        "--dataset",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        graph_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "analyze: {}", String::from_utf8_lossy(&out.stderr));
    assert!(graph_dir.join("learned_edges.csv").exists());
    assert!(graph_dir.join("learned_edges.meta.json").exists());
    assert!(graph_dir.join("knn_edges.csv").exists());
    let quality: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(graph_dir.join("graph_quality.json")).unwrap())
            .unwrap();
    assert_eq!(quality["entries"].as_array().unwrap().len(), 2);

    let contrib_dir = dir.path().join("contrib");
    let out = mmgl(&[
        "contributions",
        "--dataset",
        &manifest,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        contrib_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "contrib: {}", String::from_utf8_lossy(&out.stderr));
    let contributions = std::fs::read_to_string(contrib_dir.join("contributions.csv")).unwrap();
    let mut rows = contributions.lines();
    rows.next(); // header
    let mut checked = 0;
    for line in rows {
        let parts: Vec<&str> = line.split(',').collect();
        let sum: f64 = parts[2..].iter().map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        checked += 1;
    }
    assert_eq!(checked, 60);
    assert!(contrib_dir.join("class_average_contributions.csv").exists());
}

#[test]
fn label_sweep_emits_eight_rows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_spec(dir.path());
    let data_dir = dir.path().join("data");
    mmgl(&["synth", "--spec", &spec, "--out", data_dir.to_str().unwrap()]);
    let config = dir.path().join("sweep.cfg");
    std::fs::write(&config, "d_f = 4\nd_h = 6\nd_g = 6\nepochs = 2\neval_every = 1\n").unwrap();

    let sweep_dir = dir.path().join("sweep");
    let out = mmgl(&[
        "label-sweep",
        "--dataset",
        data_dir.join("manifest.json").to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "sweep: {}", String::from_utf8_lossy(&out.stderr));
    let sweep = std::fs::read_to_string(sweep_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 9, "header + 8 fractions");
    let first_data_line = sweep.lines().nth(1).unwrap();
    assert!(first_data_line.starts_with("0.1,"));
}

#[test]
fn exit_codes_and_error_lines() {
    // Unknown subcommand: usage error, code 1.
    let out = mmgl(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(line["error"]["kind"], "usage");

    // Missing dataset file: data error, code 2.
    let dir = tempfile::tempdir().unwrap();
    let out = mmgl(&[
        "evaluate",
        "--dataset",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line: serde_json::Value = serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(line["error"]["kind"], "data");

    // Bad config value: usage error, code 1.
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "theta = 2.0\n").unwrap();
    let out = mmgl(&[
        "evaluate",
        "--dataset",
        dir.path().join("nope.json").to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // Help succeeds.
    let out = mmgl(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
}
