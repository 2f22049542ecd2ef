use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cpad_cli::commands::gradcheck_table;
use cpad_core::autodiff::gradcheck::op_suite;
use cpad_core::camera::equalize;
use cpad_core::{ParamRange, ParamRanges};
use serde_json::Value;

fn cpad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpad"))
        .args(args)
        .env("CPAD_LOG", "warn")
        .output()
        .expect("spawn cpad")
}

fn ok(args: &[&str]) -> String {
    let out = cpad(args);
    assert!(
        out.status.success(),
        "cpad {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn encode_prints_27_values() {
    let out = ok(&["encode", "--iso", "400", "--shutter", "30", "--fnum", "2"]);
    let v: Vec<f64> = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(v.len(), 27);
    let iso = equalize(400.0, &ParamRanges::default().iso.unwrap()).unwrap();
    assert!(v[..9].iter().zip(iso).all(|(a, b)| (a - b).abs() < 1e-15));
    assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
}

#[test]
fn encode_reads_ranges_file() {
    let dir = tempfile::tempdir().unwrap();
    let ranges = dir.path().join("ranges.json");
    fs::write(&ranges, r#"{"iso":[100,6400],"shutter":[2,1000],"fnum":[2,2.8]}"#).unwrap();
    let out = ok(&[
        "encode",
        "--iso",
        "100",
        "--shutter",
        "1000",
        "--fnum",
        "2.8",
        "--ranges",
        p(&ranges),
    ]);
    let v: Vec<f64> = serde_json::from_str(out.trim()).unwrap();
    assert_eq!((v[0], v[9], v[18]), (0.0, 1.0, 1.0));
    let fnum = equalize(2.8, &ParamRange::new(2.0, 2.8).unwrap()).unwrap();
    assert!(v[18..].iter().zip(fnum).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn encode_rejects_bad_input() {
    assert!(!cpad(&["encode", "--iso", "-5", "--shutter", "30", "--fnum", "2"])
        .status
        .success());
    assert!(!cpad(&["encode", "--iso", "100", "--shutter", "30"]).status.success());
    // device codes need a trained embedding
    assert!(!cpad(&["encode", "--iso", "100", "--shutter", "30", "--device", "1"])
        .status
        .success());
}

#[test]
fn synth_train_eval_sweep_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", "12", "--patch", "32", "--seed", "4", "--out", p(&data)]);
    assert!(data.join("clean/00000.png").exists() && data.join("noisy/00011.png").exists());
    let meta = fs::read_to_string(data.join("meta.jsonl")).unwrap();
    let first: Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
    for key in [
        "index",
        "iso",
        "shutter_speed",
        "f_number",
        "lambda_read",
        "lambda_shot",
        "seed",
    ] {
        assert!(first.get(key).is_some(), "meta.jsonl lacks {key}");
    }
    assert_eq!(meta.lines().count(), 12);

    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"width": 4}, "train": {"iters": 6, "batch": 2, "patch": 16, "stride": 16, "val_every": 3, "checkpoint_every": 3}}"#,
    )
    .unwrap();
    let ckpts = dir.path().join("ckpt");
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&ckpts)]);
    let log = fs::read_to_string(ckpts.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let rec: Value = serde_json::from_str(log.lines().nth(2).unwrap()).unwrap();
    assert!(rec["val_psnr"].is_f64() && rec["lr"].is_f64() && rec["loss"].is_f64());
    let ckpt = ckpts.join("final.cpad");
    assert!(ckpt.exists() && ckpts.join("ckpt_000003.cpad").exists());

    let report = dir.path().join("report.json");
    let line = ok(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data),
        "--out",
        p(&report),
        "--sweep-grid",
        "100,6400",
    ]);
    assert!(line.starts_with("psnr"));
    let r: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["images"].as_array().unwrap().len(), 12);
    assert_eq!(r["sweeps"][0]["records"].as_array().unwrap().len(), 2);

    let sweep_dir = dir.path().join("sweep");
    let noisy = data.join("noisy/00000.png");
    let out = ok(&[
        "sweep",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&noisy),
        "--axis",
        "iso",
        "--grid",
        "100,400,1600,6400",
        "--out",
        p(&sweep_dir),
    ]);
    assert_eq!(out.lines().count(), 4);
    assert!(sweep_dir.join("step_03.png").exists());
    let recs: Vec<Value> = serde_json::from_slice(&fs::read(sweep_dir.join("records.json")).unwrap()).unwrap();
    assert_eq!(recs[2]["value"], 1600.0);

    // a baseline run from the same config
    let base = dir.path().join("base");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&base),
        "--baseline",
    ]);
    assert!(base.join("final.cpad").exists());

    // the checkpoint's device embedding makes --device encodable
    let v: Vec<f64> = serde_json::from_str(
        ok(&[
            "encode",
            "--iso",
            "100",
            "--shutter",
            "30",
            "--device",
            "1",
            "--ckpt",
            p(&ckpt),
        ])
        .trim(),
    )
    .unwrap();
    assert!(v[18..].iter().all(|x| *x > 0.0 && *x < 1.0));
}

#[test]
fn train_reports_missing_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = cpad(&["train", "--data", p(&dir.path().join("nope")), "--out", p(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gradcheck_table_lists_every_check() {
    let reports = op_suite(0).unwrap();
    let table = gradcheck_table(&reports);
    assert_eq!(table.lines().count(), reports.len() + 1);
    assert!(table.lines().skip(1).all(|l| l.ends_with("ok")));
}
