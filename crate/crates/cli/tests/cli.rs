use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use urm_cli::persist::{load_checkpoint, load_ensemble, read_dataset, write_dataset, Dataset};

fn urm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = urm(args);
    assert!(
        out.status.success(),
        "urm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset shared by most tests.
fn small_data(dir: &Path) -> PathBuf {
    let d = dir.join("data");
    ok(&[
        "--out-dir", s(&d), "--seed", "5", "gen-data",
        "--count", "1200", "--ood-fraction", "0.25",
        "--val-pairs", "60", "--eval-pairs", "120",
        "--bon-prompts", "10", "--bon-candidates", "8",
    ]);
    d
}

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = |out: &Path| {
        vec![
            "--out-dir".to_string(), s(out).to_string(), "--seed".into(), "9".into(), "gen-data".into(),
            "--count".into(), "1000".into(), "--ood-fraction".into(), "0.2".into(),
            "--bon-prompts".into(), "4".into(),
        ]
    };
    let run = |out: &Path| {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let printed = run(&a);
    assert!(printed.contains("id records: 800"), "{printed}");
    assert!(printed.contains("ood records: 200"), "{printed}");
    run(&b);
    assert_eq!(files_in(&a), files_in(&b));

    let id: usize = ["train.jsonl", "val.jsonl", "eval.jsonl"]
        .iter()
        .map(|f| read_dataset(&a.join(f)).unwrap().1.records.len())
        .sum();
    let (_, ood) = read_dataset(&a.join("ood.jsonl")).unwrap();
    assert_eq!(id, 800);
    assert_eq!(ood.records.len(), 200);
    assert!(ood.records.iter().all(|r| r.is_ood));
}

#[test]
fn bad_ood_fraction_is_a_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = urm(&["--out-dir", s(dir.path()), "gen-data", "--ood-fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(files_in(dir.path()).is_empty());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[world]\ndelta = 6.0\nwobble = 1\n").unwrap();
    let out = urm(&["--config", s(&cfg), "--out-dir", s(dir.path()), "gen-data", "--count", "50"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("wobble"));
}

#[test]
fn unwritable_output_is_an_io_error_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let target = blocker.join("sub");
    let out = urm(&["--out-dir", s(&target), "gen-data", "--count", "50"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&target)));
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = urm(&["--out-dir", s(dir.path()), "eval", "--model", s(&missing), "--pairs", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_variants() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("models");
    let train = s(&data.join("train.jsonl")).to_string();

    let bad = urm(&["--out-dir", s(&out), "train", "--data", &train, "--num-attributes", "3"]);
    assert_eq!(bad.status.code(), Some(2));

    ok(&["--out-dir", s(&out), "train", "--data", &train, "--epochs", "0", "--name", "init"]);
    let (init, _) = load_checkpoint(&out.join("init.json")).unwrap();
    assert_eq!(init.metadata.steps, 0);

    ok(&["--out-dir", s(&out), "train", "--data", &train, "--epochs", "1", "--ensemble", "3", "--seeds", "1,2,3", "--name", "ens"]);
    let ens = load_ensemble(&out.join("ens.manifest.json")).unwrap();
    assert_eq!(ens.len(), 3);
    assert_eq!(ens.seeds(), &[1, 2, 3]);
    for seed in 1..=3 {
        assert!(out.join(format!("ens.seed{seed}.json")).exists());
    }

    for loss in ["regression", "deterministic"] {
        ok(&["--out-dir", s(&out), "train", "--data", &train, "--epochs", "1", "--loss", loss, "--name", loss]);
    }
    let history = fs::read_to_string(out.join("deterministic.history.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,mean_log_std,val_accuracy\n"));
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn eval_reports_are_byte_stable_and_inf_curve_matches_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let pairs = data.join("eval.jsonl");
    let oracle = data.join("oracle.json");
    let args = |out: &Path| {
        vec![
            "--out-dir".to_string(), s(out).into(), "eval".into(), "--model".into(), s(&oracle).into(),
            "--pairs".into(), s(&pairs).into(), "--thresholds".into(), "inf".into(),
        ]
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let v = args(out);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(files_in(&a), files_in(&b));

    let report: serde_json::Value = serde_json::from_slice(&fs::read(a.join("eval.json")).unwrap()).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    let curve = report["curve"]["accuracy"].as_array().unwrap();
    assert_eq!(curve.len(), 1);
    assert_eq!(curve[0].as_f64().unwrap(), acc);
    // Noise-free pairs under the world's own weights.
    let ties = report["tie_fraction"].as_f64().unwrap();
    assert_eq!(acc, 1.0 - ties);
}

#[test]
fn deterministic_model_still_gets_a_degenerate_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("m");
    ok(&["--out-dir", s(&out), "train", "--data", s(&data.join("train.jsonl")), "--epochs", "1", "--loss", "deterministic"]);
    ok(&["--out-dir", s(&out), "eval", "--model", s(&out.join("model.json")), "--pairs", s(&data.join("eval.jsonl"))]);
    let bad = urm(&[
        "--out-dir", s(&out), "eval", "--model", s(&out.join("model.json")),
        "--pairs", s(&data.join("eval.jsonl")), "--thresholds", "1,inf",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn merge_endpoint_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("m");
    let train = s(&data.join("train.jsonl")).to_string();
    ok(&["--out-dir", s(&out), "--seed", "1", "train", "--data", &train, "--epochs", "1", "--name", "m1"]);
    ok(&["--out-dir", s(&out), "--seed", "2", "train", "--data", &train, "--epochs", "1", "--name", "m2"]);
    let (m1, m2) = (out.join("m1.json"), out.join("m2.json"));
    ok(&["--out-dir", s(&out), "merge", "--lambda", "1.0", s(&m1), s(&m2)]);
    let (a, _) = load_checkpoint(&m1).unwrap();
    let (merged, _) = load_checkpoint(&out.join("merged.json")).unwrap();
    let bits = |m: &urm_core::Urm| m.backbone_params().iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&merged));
    assert!(merged.metadata.provenance.as_deref().unwrap().contains("merge"));

    ok(&["--out-dir", s(&out), "train", "--data", &train, "--epochs", "1", "--loss", "deterministic", "--name", "det"]);
    let mismatch = urm(&["--out-dir", s(&out), "merge", "--lambda", "0.5", s(&m1), s(&out.join("det.json"))]);
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn filter_keeps_half_of_four_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (header, ds) = read_dataset(&data.join("eval_noisy.jsonl")).unwrap();
    let four = dir.path().join("four.jsonl");
    write_dataset(&four, &header, &Dataset { records: Vec::new(), pairs: ds.pairs[..4].to_vec() }).unwrap();
    let out = dir.path().join("f");
    ok(&["--out-dir", s(&out), "filter", "--model", s(&data.join("oracle.json")), "--pairs", s(&four), "--keep-fraction", "0.5"]);
    let (_, kept) = read_dataset(&out.join("filtered.jsonl")).unwrap();
    assert_eq!(kept.pairs.len(), 2);
}

#[test]
fn bon_csv_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("b");
    ok(&["--out-dir", s(&out), "bon", "--model", s(&data.join("oracle.json")), "--candidates", s(&data.join("bon.jsonl")), "--n", "1,2,4,8"]);
    let csv = fs::read_to_string(out.join("bon.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("n,mean_true_utility,mean_reward,prompts"));
    let ns: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ns, ["1", "2", "4", "8"]);
}

#[test]
fn gating_on_a_frozen_base() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("g");
    ok(&["--out-dir", s(&out), "train", "--data", s(&data.join("train.jsonl")), "--epochs", "1", "--name", "base"]);
    ok(&[
        "--out-dir", s(&out), "train", "--base", s(&out.join("base.json")),
        "--gating-pairs", s(&data.join("val.jsonl")), "--name", "gated",
    ]);
    let (gated, _) = load_checkpoint(&out.join("gated.json")).unwrap();
    assert!(matches!(gated.combination(), urm_core::model::Combination::Gated(_)));
    assert!(out.join("gated.gating.csv").exists());
}

#[test]
fn ood_report_lists_every_ensemble_kind() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("o");
    ok(&["--out-dir", s(&out), "train", "--data", s(&data.join("train.jsonl")), "--epochs", "1", "--ensemble", "2", "--name", "e"]);
    ok(&[
        "--out-dir", s(&out), "ood-report", "--model", s(&out.join("e.manifest.json")),
        "--id", s(&data.join("eval.jsonl")), "--ood", s(&data.join("ood.jsonl")),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ood_report.json")).unwrap()).unwrap();
    let kinds: Vec<&str> = report["report"]["kinds"]
        .as_array()
        .unwrap()
        .iter()
        .map(|k| k["kind"].as_str().unwrap())
        .collect();
    assert_eq!(kinds, ["aleatoric", "u1", "u2"]);
    let hist = &report["report"]["kinds"][0]["id"]["histogram"];
    assert_eq!(hist["edges"].as_array().unwrap().len(), 21);
}

#[test]
fn weights_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let (header, _) = read_dataset(&data.join("train.jsonl")).unwrap();
    let mut toml = String::from("[weights]\n");
    for (i, a) in header.attributes.iter().enumerate() {
        toml.push_str(&format!("{a} = {}\n", if i == 0 { 1.0 } else { 0.0 }));
    }
    let cfg = dir.path().join("w.toml");
    fs::write(&cfg, toml).unwrap();
    let out = dir.path().join("w");
    ok(&["--config", s(&cfg), "--out-dir", s(&out), "train", "--data", s(&data.join("train.jsonl")), "--epochs", "0"]);
    let (m, config) = load_checkpoint(&out.join("model.json")).unwrap();
    match m.combination() {
        urm_core::model::Combination::Fixed(w) => assert_eq!(w, &[1.0, 0.0, 0.0, 0.0, 0.0]),
        _ => panic!("expected fixed weights"),
    }
    assert_eq!(config["train"]["weights"][0].as_f64(), Some(1.0));
}
