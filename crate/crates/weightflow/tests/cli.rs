use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use tempfile::TempDir;
use weightflow::mnist::{TRAIN_IMAGES, TRAIN_LABELS};
use weightflow_core::dataset::{encode_idx, Dataset};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_weightflow"));
    c.env_remove("WEIGHTFLOW_THREADS");
    c
}

/// Blurry class-dependent blobs, enough structure for a few epochs.
fn synthetic_mnist(dir: &Path, n: usize) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = (k % 10) as u8;
        let (cx, cy) = (6.0 + 1.6 * f64::from(label), 14.0 + 4.0 * (f64::from(label) * 0.9).sin());
        for r in 0..28 {
            for c in 0..28 {
                let d2 = (f64::from(r) - cy).powi(2) + (f64::from(c) - cx).powi(2);
                let v = 255.0 * (-d2 / 18.0).exp() + rng.gen_range(0.0..20.0);
                pixels.push(v.min(255.0) as u8);
            }
        }
        labels.push(label);
    }
    let ds = Dataset::from_raw(pixels, labels, 28, 28).unwrap();
    let (img, lab) = encode_idx(&ds);
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(TRAIN_IMAGES), img).unwrap();
    fs::write(dir.join(TRAIN_LABELS), lab).unwrap();
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn full_pipeline(data: &Path, run_dir: &Path) {
    ok(&["train", "--mnist-dir", s(data), "--run", s(run_dir), "--epochs", "3", "--seed", "11", "--batch-size", "16", "--compare-samples", "40"]);
    ok(&["evolve", "--run", s(run_dir), "--grid", "24", "--substeps", "20"]);
    ok(&["compare", "--run", s(run_dir), "--ensemble", "2", "--grid", "24"]);
    ok(&["terminal", "--run", s(run_dir), "--arc-steps", "50"]);
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 120);
    let a = tmp.path().join("a");
    let b = tmp.path().join("nested/b");
    full_pipeline(&data, &a);
    full_pipeline(&data, &b);
    let fa = files(&a);
    assert_eq!(fa, files(&b));
    for name in ["manifest.json", "comparison.csv", "cs_report.json", "curves.csv", "row_updates.jsonl"] {
        assert!(fa.contains(&PathBuf::from(name)), "missing {name}");
    }
    for f in &fa {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
    let csv = fs::read_to_string(a.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,layer,mse,pearson,ensemble,seed"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
}

#[test]
fn rerunning_compare_rewrites_the_table() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 60);
    let r = tmp.path().join("run");
    ok(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "2", "--batch-size", "16", "--compare-samples", "20"]);
    ok(&["evolve", "--run", s(&r), "--grid", "20"]);
    ok(&["compare", "--run", s(&r), "--ensemble", "1", "--epoch", "1"]);
    ok(&["compare", "--run", s(&r), "--ensemble", "1", "--epoch", "1"]);
    let csv = fs::read_to_string(r.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("1,")));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 30);
    let r = tmp.path().join("run");
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(code(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "0"]), Some(2));
    assert_eq!(code(&["train", "--mnist-dir", s(&tmp.path().join("nope")), "--run", s(&r)]), Some(2));
    assert_eq!(code(&["train", "--bogus"]), Some(2));
    assert_eq!(code(&["evolve", "--run", s(&tmp.path().join("missing"))]), Some(2));
    let out = bin()
        .env("WEIGHTFLOW_THREADS", "zero")
        .args(["train", "--mnist-dir", s(&data), "--run", s(&r)])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    ok(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "1", "--compare-samples", "10"]);
    // Compare before evolve: the densities do not exist yet.
    assert_eq!(code(&["compare", "--run", s(&r)]), Some(2));
    ok(&["evolve", "--run", s(&r), "--grid", "16"]);
    assert_eq!(code(&["compare", "--run", s(&r), "--epoch", "5"]), Some(2));
    // Only two densities: too few for terminal analysis.
    assert_eq!(code(&["terminal", "--run", s(&r)]), Some(2));
}

#[test]
fn tampered_artifacts_are_rejected() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 30);
    let r = tmp.path().join("run");
    ok(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "1", "--compare-samples", "10"]);
    let snap = r.join("epoch_001/layer_2.bin");
    let mut bytes = fs::read(&snap).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&snap, bytes).unwrap();
    let out = run(&["evolve", "--run", s(&r)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layer_2.bin"));
}

#[test]
fn unstable_time_step_exits_with_three_and_suggests_substeps() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 200);
    let r = tmp.path().join("run");
    // A large learning rate moves the rows by whole units per epoch.
    ok(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "1", "--eta", "0.05", "--batch-size", "8", "--compare-samples", "10"]);
    let out = run(&["evolve", "--run", s(&r), "--grid", "64", "--substeps", "1"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("substeps"));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 40);
    let r = tmp.path().join("run");
    let cfg = tmp.path().join("wf.conf");
    fs::write(
        &cfg,
        format!("# test config\nmnist_dir = {}\nrun = {}\nepochs = 2\nbatch-size = 10\ncompare-samples = 8\n", s(&data), s(&r)),
    )
    .unwrap();
    ok(&["--config", s(&cfg), "train", "--epochs", "1"]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["train"]["epochs"], 1);
    assert_eq!(m["train"]["batch_size"], 10);
    assert_eq!(m["train"]["compare_samples"], 8);

    fs::write(&cfg, "epochz = 3\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "train"]).status.code(), Some(2));
}

#[test]
fn terminal_accepts_explicit_curve_seeds() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("mnist");
    synthetic_mnist(&data, 60);
    let r = tmp.path().join("run");
    ok(&["train", "--mnist-dir", s(&data), "--run", s(&r), "--epochs", "3", "--batch-size", "8", "--compare-samples", "10"]);
    ok(&["evolve", "--run", s(&r), "--grid", "20"]);
    ok(&["terminal", "--run", s(&r), "--curve-seeds", "0.1,0.2;-0.3,0.4", "--arc-steps", "20"]);
    let rep: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("cs_report.json")).unwrap()).unwrap();
    for layer in rep["layers"].as_array().unwrap() {
        assert_eq!(layer["curves"].as_array().unwrap().len(), 2);
        assert_eq!(layer["cs_residuals"].as_array().unwrap().len(), 2);
        assert_eq!(layer["mass"]["masses"].as_array().unwrap().len(), 4);
    }
    let curves = fs::read_to_string(r.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().next(), Some("curve_id,s,x1,x2,P"));
    assert_eq!(run(&["terminal", "--run", s(&r), "--curve-seeds", "0.1"]).status.code(), Some(2));
}
