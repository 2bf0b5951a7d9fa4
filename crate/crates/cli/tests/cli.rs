use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chanfluence"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn detect_matches_golden_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&[
        "detect",
        "--config",
        scenario("detect_synthetic.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    let golden =
        fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/detect_synthetic_summary.json"))
            .unwrap();
    assert_eq!(fs::read_to_string(out.join("summary.json")).unwrap(), golden);
}

/// Runs a command twice into the same directory and compares every file.
fn assert_reproducible(args: &[&str], out: &Path) {
    let mut full: Vec<&str> = args.to_vec();
    let out_s = out.to_str().unwrap();
    full.extend(["--out", out_s]);
    ok(&full);
    let first = dir_bytes(out);
    fs::remove_dir_all(out).unwrap();
    ok(&full);
    let second = dir_bytes(out);
    let names: Vec<&str> = first.iter().map(|(n, _)| n.as_str()).collect();
    assert!(names.contains(&"manifest.json"), "{names:?}");
    assert_eq!(first.len(), second.len());
    for ((na, ba), (nb, bb)) in first.iter().zip(&second) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs between runs");
    }
}

#[test]
fn detect_and_prune_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let det = scenario("detect_synthetic.json");
    let pr = scenario("prune_synthetic.json");
    assert_reproducible(
        &["detect", "--config", det.to_str().unwrap(), "--threads", "2"],
        &tmp.path().join("d"),
    );
    assert_reproducible(
        &[
            "prune",
            "--config",
            pr.to_str().unwrap(),
            "--set",
            "repeats=2",
            "--set",
            "m=[4]",
            "--set",
            "epochs=10",
        ],
        &tmp.path().join("p"),
    );
}

#[test]
fn prune_with_all_channels_matches_full_model() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("p");
    ok(&[
        "prune",
        "--config",
        scenario("prune_synthetic.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--set",
        "repeats=1",
        "--set",
        "m=[32]",
        "--set",
        "epochs=5",
        "--seed",
        "3",
    ]);
    let csv = fs::read_to_string(out.join("pruning.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2], "3");
        assert_eq!(f[3], f[4], "{row}");
    }
}

#[test]
fn invalid_normalization_exits_2_naming_the_field() {
    let out = run(&["detect", "--set", "normalization=zscore"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalization"));
}

#[test]
fn unknown_field_and_bad_config_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    fs::write(&cfg, r#"{"suite": "anomaly", "noise": 0.1}"#).unwrap();
    let out = run(&["synth", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise"));
    assert_eq!(
        run(&["synth", "--config", tmp.path().join("nope.json").to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_input_exits_1_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["train", "--set", &format!("data={}", tmp.path().join("none").display())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.csv"));
}

#[test]
fn synth_train_influence_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let model = tmp.path().join("model");
    let infl = tmp.path().join("infl");
    let selfi = tmp.path().join("self");
    ok(&[
        "synth",
        "--set",
        "suite=anomaly",
        "--set",
        "train_len=120",
        "--set",
        "val_len=100",
        "--set",
        "test_len=100",
        "--out",
        data.to_str().unwrap(),
    ]);
    for f in [
        "train.csv",
        "val.csv",
        "test.csv",
        "val_labels.csv",
        "test_labels.csv",
        "manifest.json",
    ] {
        assert!(data.join(f).is_file(), "{f}");
    }
    ok(&[
        "train",
        "--set",
        &format!("data={}", data.display()),
        "--set",
        "epochs=5",
        "--out",
        model.to_str().unwrap(),
    ]);
    let ckpt = model.join("model.json");
    let test = data.join("test.csv");
    ok(&[
        "influence",
        "--set",
        &format!("checkpoint={}", ckpt.display()),
        "--set",
        &format!("series={}", test.display()),
        "--set",
        "mode=matrix",
        "--set",
        "src_window=3",
        "--set",
        "dst_window=7",
        "--out",
        infl.to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(infl.join("influence.json")).unwrap()).unwrap();
    let (total, tr) = (summary["total"].as_f64().unwrap(), summary["tracin"].as_f64().unwrap());
    assert!((total - tr).abs() <= 1e-9 * (tr.abs() + 1e-12), "{total} vs {tr}");
    let matrix = fs::read_to_string(infl.join("influence.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 9);

    ok(&[
        "influence",
        "--set",
        &format!("checkpoint={}", ckpt.display()),
        "--set",
        &format!("series={}", test.display()),
        "--set",
        "mode=self_influence",
        "--out",
        selfi.to_str().unwrap(),
    ]);
    let rows = fs::read_to_string(selfi.join("self_influence.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 91);
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() >= 0.0)));

    let det = tmp.path().join("det");
    ok(&[
        "detect",
        "--set",
        &format!("data={}", data.display()),
        "--set",
        &format!("checkpoint={}", ckpt.display()),
        "--out",
        det.to_str().unwrap(),
    ]);
    assert!(!det.join("model.json").exists());
    let scores = fs::read_to_string(det.join("scores.csv")).unwrap();
    assert_eq!(
        scores.lines().next().unwrap(),
        "origin_t,raw_score,normalized_score,prediction,label"
    );
}
