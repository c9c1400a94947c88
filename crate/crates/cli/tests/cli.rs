use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use topicmatch::synth_data::DatasetManifest;
use topicmatch_cli::golden;

fn run_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topicmatch")).current_dir(cwd).args(args).output().unwrap()
}

fn run(args: &[&str]) -> Output {
    run_in(Path::new(env!("CARGO_TARGET_TMPDIR")), args)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path, n: usize) {
    let out = run(&["gen-data", "--n", &n.to_string(), "--out", s(dir), "--seed", "7", "--dims", "64x64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn fixture(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    golden::write_fixture(dir)
}

#[test]
fn help_exits_zero_without_side_effects() {
    let cwd = TempDir::new().unwrap();
    for sub in ["", "gen-data", "ingest", "train", "match", "eval", "profile", "viz-topics", "covis-sweep"] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let out = run_in(cwd.path(), &args);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(fs::read_dir(cwd.path()).unwrap().count(), 0);
}

#[test]
fn gen_data_rejects_zero_pairs() {
    let dir = TempDir::new().unwrap();
    let out = run(&["gen-data", "--n", "0", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n must be positive"));
}

#[test]
fn gen_data_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let (d1, d2) = (dir.path().join("d1"), dir.path().join("d2"));
    gen_data(&d1, 3);
    gen_data(&d2, 3);
    let hashes = |d: &Path| -> Vec<String> {
        let m = DatasetManifest::read(d).unwrap();
        assert_eq!(m.pairs.len(), 3);
        m.pairs.iter().flat_map(|p| p.arrays.values().map(|a| a.sha256.clone())).collect()
    };
    assert_eq!(hashes(&d1), hashes(&d2));
    assert_eq!(fs::read(d1.join("pairs/00000/a.pgm")).unwrap(), fs::read(d2.join("pairs/00000/a.pgm")).unwrap());
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"version": 1, "scene": {"hieght": 64}}"#).unwrap();
    let out = run(&["gen-data", "--n", "1", "--out", s(&dir.path().join("d")), "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"version": 1, "scene": {"height": 64, "width": 64, "max_rotation_deg": 5.0}}"#).unwrap();
    let d = dir.path().join("d");
    let out = run(&["gen-data", "--n", "1", "--out", s(&d), "--config", s(&cfg), "--dims", "72x80"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = DatasetManifest::read(&d).unwrap();
    let params = m.params.unwrap();
    assert_eq!((params.height, params.width), (72, 80));
    assert_eq!(params.max_rotation_deg, 5.0);
}

#[test]
fn train_requires_data() {
    let dir = TempDir::new().unwrap();
    let out = run(&["train", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tiny_two_epoch_training_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 3);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"version": 1, "train": {"epochs": 2, "train_on": "all", "validate_every": 0}}"#).unwrap();
    for variant in ["fast", "plus"] {
        let out_dir = dir.path().join(format!("run_{variant}"));
        let out = run(&["train", "--data", s(&data), "--out", s(&out_dir), "--config", s(&cfg), "--tiny", "--variant", variant]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(out_dir.join("final.ckpt").exists());
        let log = fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
        let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 2);
        assert!(records.iter().all(|r| r["variant"] == variant));
    }
}

#[test]
fn profile_rows_sum_to_total_and_variants_differ() {
    let dir = TempDir::new().unwrap();
    let mut totals = Vec::new();
    for variant in ["fast", "plus"] {
        let out_dir = dir.path().join(variant);
        let out = run(&["profile", "--out", s(&out_dir), "--variant", variant, "--height", "256", "--width", "256", "--topics", "100"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = fs::read_to_string(out_dir.join("profile.csv")).unwrap();
        let rows: Vec<(String, u64)> = csv
            .lines()
            .skip(1)
            .map(|l| {
                let (k, v) = l.split_once(',').unwrap();
                (k.to_string(), v.parse().unwrap())
            })
            .collect();
        let (total_row, stages) = rows.split_last().unwrap();
        assert_eq!(total_row.0, "total");
        assert_eq!(stages.iter().map(|r| r.1).sum::<u64>(), total_row.1);
        totals.push(total_row.1);
    }
    assert_ne!(totals[0], totals[1]);
}

#[test]
fn oracle_eval_is_near_perfect() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 4);
    let out_dir = dir.path().join("eval");
    let out = run(&["eval", "--data", s(&data), "--out", s(&out_dir), "--oracle", "--split", "all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_dir.join("eval_report.json")).unwrap()).unwrap();
    assert!(report["auc"][0].as_f64().unwrap() > 0.99);
}

#[test]
fn eval_without_model_or_oracle_is_rejected() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 1);
    let out = run(&["eval", "--data", s(&data), "--out", s(&dir.path().join("e")), "--split", "all"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn match_with_tau_one_writes_header_only_and_viz() {
    let dir = TempDir::new().unwrap();
    let (ckpt, a, b) = fixture(dir.path());
    let out_dir = dir.path().join("m");
    let out = run(&["match", s(&a), s(&b), "--checkpoint", s(&ckpt), "--out", s(&out_dir), "--tau", "1.0", "--viz", "viz.ppm"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(out_dir.join("matches.csv")).unwrap(), "xa,ya,xb,yb,conf\n");
    let viz = fs::read(out_dir.join("viz.ppm")).unwrap();
    assert!(viz.starts_with(b"P6"));
    assert!(String::from_utf8_lossy(&viz[..20]).contains("128 64"));
}

#[test]
fn unreadable_image_exits_three() {
    let dir = TempDir::new().unwrap();
    let (ckpt, a, _) = fixture(dir.path());
    let bogus = dir.path().join("bogus.pgm");
    fs::write(&bogus, b"not an image").unwrap();
    let out = run(&["match", s(&a), s(&bogus), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("m"))]);
    assert_eq!(out.status.code(), Some(3));
    let missing = run(&["match", s(&a), s(&dir.path().join("nope.pgm")), "--checkpoint", s(&ckpt), "--out", s(&dir.path().join("m"))]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn match_csv_matches_golden_file() {
    let dir = TempDir::new().unwrap();
    let (ckpt, a, b) = fixture(dir.path());
    let out_dir = dir.path().join("m");
    let out = run(&["match", s(&a), s(&b), "--checkpoint", s(&ckpt), "--out", s(&out_dir), "--tau", golden::TAU]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let got = fs::read_to_string(out_dir.join("matches.csv")).unwrap();
    let path = golden::golden_path();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, &got).unwrap();
    }
    let expected = fs::read_to_string(&path).expect("golden file present");
    assert!(got.lines().count() > 1, "golden run should produce matches");
    assert_eq!(got, expected);
}

#[test]
fn viz_topics_writes_overlays_and_palette() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 1);
    let (ckpt, _, _) = fixture(dir.path());
    let out_dir = dir.path().join("v");
    let out = run(&["viz-topics", "--checkpoint", s(&ckpt), "--data", s(&data), "--pair", "0", "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["pair00000_a_overlay.ppm", "pair00000_b_overlay.ppm", "pair00000_a_topics.pgm", "palette.json"] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn outputs_stay_under_out_dir() {
    let cwd = TempDir::new().unwrap();
    let dir = TempDir::new().unwrap();
    let out = run_in(cwd.path(), &["gen-data", "--n", "1", "--out", s(&dir.path().join("d")), "--dims", "64x64"]);
    assert!(out.status.success());
    let out = run_in(cwd.path(), &["profile", "--out", s(&dir.path().join("p")), "--tiny"]);
    assert!(out.status.success());
    assert_eq!(fs::read_dir(cwd.path()).unwrap().count(), 0);
}
