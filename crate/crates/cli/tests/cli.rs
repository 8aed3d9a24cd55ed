use std::path::Path;
use std::process::{Command, Output};

fn dalnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dalnet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dalnet")
}

fn ok(args: &[&str]) -> String {
    let out = dalnet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_eval_roundtrip() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "2", "--seed", "3"]);
    let gt = data.join("annotations.jsonl");
    assert_eq!(std::fs::read_to_string(&gt).unwrap().lines().count(), 2);

    // refuses to overwrite without --force
    assert!(!dalnet(&["synth", "--out", p(&data), "--count", "1"]).status.success());

    let report = root.path().join("report.json");
    let table = ok(&["eval", "--pred", p(&gt), "--gt", p(&gt), "--out", p(&report)]);
    assert!(table.contains("mF1 1.0000"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["mf1"], 1.0);
}

#[test]
fn bad_arguments_fail_cleanly() {
    assert!(!dalnet(&["train", "--r", "4"]).status.success());
    assert!(!dalnet(&["frobnicate"]).status.success());
    let out = dalnet(&["infer", "--checkpoint", "/nonexistent.ckpt", "--out", "/tmp/x.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = dalnet(&["train", "--set", "no_such_field=1"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_field"));
}

#[test]
fn train_infer_viz() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    ok(&["synth", "--out", p(&data), "--count", "2"]);
    let cfg = root.path().join("tiny.json");
    std::fs::write(
        &cfg,
        r#"{
            "epochs": 1,
            "batch_size": 2,
            "model": {"input_height": 64, "input_width": 128, "backbone_channels": [4, 8, 8, 8], "fpn_channels": 8, "generator_hidden": 8},
            "preprocess": {"out_height": 64, "out_width": 128}
        }"#,
    )
    .unwrap();
    let run = root.path().join("run");
    let gt = data.join("annotations.jsonl");
    ok(&["train", "--config", p(&cfg), "--train-data", p(&gt), "--out", p(&run), "--set", "loss.slope=2"]);
    let ckpt = run.join("final.ckpt");
    assert!(ckpt.is_file() && run.join("best.ckpt").is_file());
    assert!(!dalnet(&["train", "--config", p(&cfg), "--train-data", p(&gt), "--out", p(&run)]).status.success());

    let pred = root.path().join("pred.jsonl");
    ok(&["infer", "--checkpoint", p(&ckpt), "--out", p(&pred), "--threshold", "0", p(&gt)]);
    assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 2);
    ok(&["eval", "--pred", p(&pred), "--gt", p(&gt)]);

    let viz = root.path().join("viz");
    ok(&["viz", "--pred", p(&pred), "--out", p(&viz), p(&gt)]);
    assert_eq!(std::fs::read_dir(&viz).unwrap().count(), 2);
    let viz2 = root.path().join("viz2");
    ok(&["viz", "--checkpoint", p(&ckpt), "--out", p(&viz2), p(&data.join("images/00001.png"))]);
    assert!(viz2.join("00001_overlay.png").is_file());
}
