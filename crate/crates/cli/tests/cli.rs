use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mdlab::denoiser::{save_params, DenoiserParams};
use tempfile::TempDir;

fn mdlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdlab"))
        .current_dir(dir)
        .env_remove("MDLAB_OUT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = mdlab(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn corpus(dir: &Path) {
    ok(dir, &["gen-corpus", "--out", "c", "--set", "n=300"]);
}

fn decode_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut a = vec![
        "decode",
        "--out",
        out,
        "--seed",
        "5",
        "--set",
        "model=c/model.json",
        "--set",
        "L=48",
        "--set",
        "S=12",
    ];
    a.extend_from_slice(extra);
    a
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

fn error_json(o: &Output) -> serde_json::Value {
    assert!(!o.status.success());
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.trim().lines().last().unwrap()).expect("error record is JSON")
}

#[test]
fn decode_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    let extra = ["--set", "runs=2", "--set", "sampler=topk", "--set", "eos_fill=true"];
    ok(d, &decode_args("a", &extra));
    ok(d, &decode_args("b", &extra));
    for run in ["run_000", "run_001"] {
        let a = fs::read(d.join("a").join(run).join("trace.csv")).unwrap();
        let b = fs::read(d.join("b").join(run).join("trace.csv")).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{run} traces differ");
    }
    assert_ne!(
        fs::read(d.join("a/run_000/trace.csv")).unwrap(),
        fs::read(d.join("a/run_001/trace.csv")).unwrap()
    );
}

#[test]
fn rerun_from_manifest_reproduces_outputs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    ok(d, &decode_args("first", &["--set", "runs=2", "--set", "kernel=8"]));
    ok(d, &["decode", "--config", "first/manifest.json", "--out", "second"]);
    let m1: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("first/manifest.json")).unwrap()).unwrap();
    let m2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("second/manifest.json")).unwrap()).unwrap();
    assert_eq!(m1["config"], m2["config"]);
    assert_eq!(m1["outputs"], m2["outputs"]);
    assert_eq!(m1["outputs"].as_object().unwrap().len(), 5);
}

#[test]
fn hazard_zero_family_is_all_zero() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["hazard", "--out", "h", "--set", "families=zero"]);
    let rows = csv_rows(&tmp.path().join("h/hazard.csv"));
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(&r[6..9], ["0", "0", "0"], "{r:?}");
        assert_eq!(r[9], "true");
    }
}

#[test]
fn metrics_has_one_row_per_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    ok(d, &decode_args("dec", &["--set", "runs=3", "--set", "blocks=4"]));
    ok(
        d,
        &[
            "metrics",
            "--out",
            "m",
            "--set",
            "decode_dir=dec",
            "--set",
            "corpus=c/corpus.jsonl",
            "--set",
            "zone=true",
        ],
    );
    let rows = csv_rows(&d.join("m/metrics.csv"));
    assert_eq!(rows.len(), 3);
    assert!(
        rows.iter().all(|r| r.last().unwrap() == "0"),
        "violations reported: {rows:?}"
    );
    assert!(fs::read_to_string(d.join("m/zone.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn single_value_sweep_has_one_row() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    ok(
        d,
        &[
            "sweep",
            "--out",
            "s",
            "--set",
            "model=c/model.json",
            "--set",
            "L=48",
            "--set",
            "S=12",
            "--set",
            "axis=kernel_size",
            "--set",
            "values=16",
            "--set",
            "seeds=1",
        ],
    );
    assert_eq!(csv_rows(&d.join("s/sweep.csv")).len(), 1);
    assert_eq!(csv_rows(&d.join("s/summary.csv")).len(), 1);
    assert!(d.join("s/sweep.svg").exists());
}

#[test]
fn sweep_rejects_incompatible_axis() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    let o = mdlab(
        d,
        &[
            "sweep",
            "--out",
            "s",
            "--set",
            "model=c/model.json",
            "--set",
            "L=48",
            "--set",
            "S=12",
            "--set",
            "kernel=8",
            "--set",
            "axis=block_size",
            "--set",
            "values=24",
        ],
    );
    assert_eq!(error_json(&o)["kind"], "config");
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let o = mdlab(tmp.path(), &["hazard", "--out", "h", "--set", "familes=zero"]);
    let e = error_json(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("familes"));
    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("h/error.json")).unwrap()).unwrap();
    assert_eq!(on_disk, e);
}

#[test]
fn missing_file_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let o = mdlab(tmp.path(), &["train", "--out", "t", "--set", "corpus=nope.jsonl"]);
    assert_eq!(error_json(&o)["kind"], "io");
}

#[test]
fn vocab_mismatch_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    save_params(&d.join("small.json"), &DenoiserParams::zeros(10, 4).unwrap()).unwrap();
    let o = mdlab(
        d,
        &decode_args("x", &["--set", "denoiser=params", "--set", "params=small.json"]),
    );
    let e = error_json(&o);
    assert_eq!(e["kind"], "config");
    assert!(e["message"].as_str().unwrap().contains("support"));
}

#[test]
fn config_sections_and_precedence() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    fs::write(
        d.join("run.cfg"),
        "model = c/model.json\nL = 40\nS = 10\n[decode]\nL = 48\n[train]\nL = 1\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "decode", "--config", "run.cfg", "--out", "o", "--set", "S=12", "--seed", "9",
        ],
    );
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("o/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["L"], "48");
    assert_eq!(m["config"]["S"], "12");
    assert_eq!(m["config"]["seed"], "9");
    assert!(m["inputs"]["c/model.json"].is_string());
}

#[test]
fn output_root_from_environment() {
    let tmp = TempDir::new().unwrap();
    let root: PathBuf = tmp.path().join("root");
    let o = Command::new(env!("CARGO_BIN_EXE_mdlab"))
        .current_dir(tmp.path())
        .env("MDLAB_OUT", &root)
        .args(["hazard", "--set", "L=64", "--set", "S=16", "--set", "b=2"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(csv_rows(&root.join("hazard/hazard.csv")).len(), 2);
}

#[test]
fn training_pipeline_runs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    corpus(d);
    ok(
        d,
        &[
            "train",
            "--out",
            "t",
            "--set",
            "corpus=c/corpus.jsonl",
            "--set",
            "steps=20",
            "--set",
            "eval_every=10",
        ],
    );
    assert_eq!(csv_rows(&d.join("t/history.csv")).len(), 3);
    ok(
        d,
        &[
            "r2ft",
            "--out",
            "r",
            "--set",
            "corpus=c/corpus.jsonl",
            "--set",
            "params=t/params.json",
            "--set",
            "steps=4",
            "--set",
            "eval_every=2",
            "--set",
            "samples=2",
            "--set",
            "eval_size=8",
        ],
    );
    assert_eq!(csv_rows(&d.join("r/history.csv")).len(), 3);
    ok(
        d,
        &decode_args("dec", &["--set", "denoiser=params", "--set", "params=r/params.json"]),
    );
}
