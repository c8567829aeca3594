use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = "\
d_model = 8
n_layers = 1
n_heads = 2
max_len = 96
k_hist = 3
stage1.epochs = 1
d_c = 4
stage2.epochs = 3
stage3.epochs = 1
stage3.lr = 0.001
";

fn sella(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sella")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sella(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small synthetic dataset plus the tiny config, in a fresh directory.
fn setup() -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "7", "--users", "20", "--items", "30", "--density", "0.2", "--out", s(&data)]);
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, data, cfg)
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out_a = ok(&["synth", "--seed", "7", "--out", s(&a)]);
    let out_b = ok(&["synth", "--seed", "7", "--out", s(&b)]);
    assert_eq!(out_a, out_b);
    for f in ["manifest.json", "interactions.tsv", "items.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(sella(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sella(&["synth", "--out", "x", "--bogus"]).status.code(), Some(2));
    assert_eq!(sella(&["run", "--stage", "4"]).status.code(), Some(2));
    assert_eq!(sella(&[]).status.code(), Some(2));
}

#[test]
fn module_errors_exit_1_with_message() {
    let (dir, data, cfg) = setup();
    let out = dir.path().join("run");
    let r = sella(&["stage3", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("missing prerequisite for stage 3"), "{err}");

    let r = sella(&["ablate", "--variant", "SeLLa-Max", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("SeLLa-UI-W"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "d_model = 8\nwidth = 3\n").unwrap();
    let r = sella(&["stage1", "--config", s(&bad), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown key `width`"));
}

#[test]
fn stages_run_in_order_and_rerun_bit_identically() {
    let (dir, data, cfg) = setup();
    let run = dir.path().join("run");
    let common = ["--config", s(&cfg), "--data", s(&data), "--out", s(&run)];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(common.iter()).map(|x| x.to_string()).collect() };
    let call = |cmd: &[&str]| {
        let args = with(cmd);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    call(&["stage1"]);
    let r = sella(&with(&["stage2"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(r.status.code(), Some(1), "stage 2 needs the distilled bank");
    call(&["distill"]);
    call(&["stage2"]);
    call(&["stage3"]);
    let table = call(&["eval"]);
    assert!(table.contains("SeLLa-Rec") && table.contains("stage1-only"));
    call(&["export-align"]);
    call(&["export-attn", "--layers", "0"]);
    assert!(run.join("export/align-aligned/cosine.csv").is_file());
    let attn = std::fs::read_to_string(run.join("export/attn-rec/layer0.csv")).unwrap();
    assert!(attn.contains("<User_ID>") && attn.contains("<Item_ID>") && attn.contains("<Warm_ID>"));

    let m3 = json(&run.join("stage3/rec/manifest.json"));
    for key in ["config_hash", "data_hash", "seed", "artifact_id", "variant", "inputs"] {
        assert!(!m3[key].is_null(), "manifest lacks {key}");
    }
    assert_eq!(m3["groups"]["backbone"], json(&run.join("stage1/manifest.json"))["groups"]["backbone"]);

    // A second run driven only by the stage-3 manifest reproduces the report.
    let again = dir.path().join("again");
    let m = run.join("stage3/rec/manifest.json");
    ok(&["run", "--all", "--config", s(&m), "--data", s(&data), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(run.join("eval/rec/report.json")).unwrap(),
        std::fs::read(again.join("eval/rec/report.json")).unwrap()
    );
    assert_eq!(json(&again.join("stage3/rec/manifest.json"))["artifact_id"], m3["artifact_id"]);
}

#[test]
fn ablation_records_toggles() {
    let (dir, data, cfg) = setup();
    let run = dir.path().join("run");
    let table = ok(&[
        "ablate", "--variant", "SeLLa-Proj", "--variant", "SeLLa-w/o", "--config", s(&cfg), "--data", s(&data),
        "--out", s(&run),
    ]);
    assert!(table.contains("SeLLa-Proj") && table.contains("SeLLa-w/o"));
    let proj = json(&run.join("stage3/proj/manifest.json"));
    assert_eq!(proj["variant"]["warm_start"], Value::Bool(false));
    assert_eq!(proj["variant"]["alignment"], Value::Bool(true));
    let wo = json(&run.join("stage3/wo/manifest.json"));
    assert_eq!(wo["variant"]["alignment"], Value::Bool(false));
    assert_eq!(wo["variant"]["warm_token"], Value::Bool(false));
    assert!(run.join("stage2-plain/manifest.json").is_file());
    assert_eq!(json(&run.join("stage2-plain/manifest.json"))["metrics"]["lambda"], 0.0);
    assert!(run.join("ablate/report.json").is_file());
}
