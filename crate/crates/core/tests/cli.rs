//! End-to-end runs of the command-line tool on a tiny suite.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[suite]
seed = 5
n_train = 48
n_test = 12

[model]
d_model = 16
n_heads = 2
d_ff = 32
n_blocks = 2

[pretrain]
rounds = 1
samples = 32

[sweep]
fusion = [0.5]
temperature = []
routing_modes = ["visual-only"]
order_permutations = 2

[cka]
probe_size = 16
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_hide-forge"));
    c.env("SOURCE_DATE_EPOCH", "1700000000").env("HIDE_FORGE_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path().to_path_buf();
    let config = root.join("tiny.toml");
    std::fs::write(&config, TINY).unwrap();
    Fixture { _tmp: tmp, root, config }
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["eval", "--strategy", "nope"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let out = run(&["gen-data", "--config", "/definitely/missing.toml", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn data_errors_exit_with_two() {
    let f = fixture();
    let bad = f.root.join("bad");
    std::fs::create_dir_all(bad.join("tasks")).unwrap();
    std::fs::write(bad.join("suite.json"), "{\"not\": \"a suite\"}").unwrap();
    let out = run(&["train", "--config", s(&f.config), "--data", s(&bad), "--out", s(&f.root.join("state"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_is_reproducible_and_refuses_to_overwrite() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&a)]);
    ok(&["gen-data", "--config", s(&f.config), "--out", s(&b)]);
    let fa = files(&a);
    let fb: Vec<_> = files(&b);
    assert_eq!(fa.len(), fb.len());
    for ((pa, ba), (pb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(pa, pb);
        if pa.ends_with("run-manifest.json") {
            continue; // records its own output directory
        }
        assert_eq!(ba, bb, "{} differs", pa.display());
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["created_at"], "2023-11-14T22:13:20Z");
    assert_eq!(manifest["seed"], 5);
    assert_eq!(run(&["gen-data", "--config", s(&f.config), "--out", s(&a)]).status.code(), Some(1));
}

#[test]
fn train_eval_compose_cka_report_pipeline() {
    let f = fixture();
    let data = f.root.join("data");
    let state = f.root.join("state");
    let eval = f.root.join("eval");
    let cfg = s(&f.config);
    ok(&["gen-data", "--config", cfg, "--out", s(&data)]);
    ok(&["train", "--config", cfg, "--data", s(&data), "--out", s(&state)]);
    for name in ["base.ckpt", "encoder.ckpt", "projector.ckpt", "task0.ckpt", "task3.ckpt", "projector.stage4.ckpt"] {
        assert!(state.join(name).is_file(), "missing {name}");
    }
    ok(&["eval", "--config", cfg, "--data", s(&data), "--state", s(&state), "--strategy", "hide", "--strategy", "merge-all", "--out", s(&eval)]);
    for strategy in ["hide", "merge-all"] {
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join(format!("{strategy}.json"))).unwrap()).unwrap();
        assert_eq!(report["strategy"], strategy);
        let rows = report["accuracy_matrix"]["rows"].as_array().or(report["accuracy_matrix"].as_array()).unwrap().clone();
        assert_eq!(rows.len(), 4);
    }
    // A sequentially trained state cannot serve per-task strategies.
    let out = run(&["eval", "--config", cfg, "--data", s(&data), "--state", s(&state), "--strategy", "seq-finetune", "--out", s(&f.root.join("eval2"))]);
    assert_eq!(out.status.code(), Some(2));

    let composed = f.root.join("hide.ckpt");
    let input = data.join("tasks/shape.test.jsonl");
    ok(&["compose", "--state", s(&state), "--strategy", "hide", "--input", s(&input), "--out", s(&composed)]);
    let bytes = std::fs::read(&composed).unwrap();
    assert_eq!(&bytes[..8], b"HIDEFRG\0");
    let out = run(&["compose", "--state", s(&state), "--strategy", "oracle-top", "--input", s(&input), "--index", "100000", "--out", s(&f.root.join("x.ckpt"))]);
    assert_eq!(out.status.code(), Some(1));

    let csv = f.root.join("cka.csv");
    let task0 = state.join("task0.ckpt");
    ok(&["cka", "--state", s(&state), "--left", s(&task0), "--right", s(&task0), "--probe", s(&input), "--probe-size", "12", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("pair"));
    for line in lines {
        let value = line.rsplit(',').next().unwrap();
        assert_eq!(value.split('.').nth(1).map(str::len), Some(9), "{line}");
        assert!((value.parse::<f64>().unwrap() - 1.0).abs() < 1e-9, "{line}");
    }

    let merged = f.root.join("merged.csv");
    ok(&["report", s(&eval), "--out", s(&merged)]);
    let text = std::fs::read_to_string(&merged).unwrap();
    assert!(text.starts_with("source,seed,config_hash,strategy,sweep,task,last,avg\n"));
    assert!(text.lines().any(|l| l.contains(",hide,") && l.contains(",mean,")));
}

#[test]
fn sweep_creates_a_fresh_run_directory() {
    let f = fixture();
    let runs = f.root.join("runs");
    let out = ok(&["sweep", "--config", s(&f.config), "--out", s(&runs)]);
    let dir = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(dir.starts_with(&runs));
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-seed5"));
    for name in ["config.toml", "run-manifest.json", "reports/hide__default.json", "reports/cka.csv", "reports/parameters.csv"] {
        assert!(dir.join(name).is_file(), "missing {name}");
    }
    let again = PathBuf::from(String::from_utf8(ok(&["sweep", "--config", s(&f.config), "--out", s(&runs)]).stdout).unwrap().trim());
    assert_ne!(dir, again);
    assert_eq!(
        std::fs::read(dir.join("reports/hide__default.json")).unwrap(),
        std::fs::read(again.join("reports/hide__default.json")).unwrap()
    );
}
