//! Drives the `dfp` binary end to end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfp::dft1::{self, StoredTensor};
use dfp::harness::idx::{parse_idx, read_idx, read_idx_bytes, IdxFile};
use dfp::tensor::FloatTensor;
use dfp::train::{load_checkpoint, read_metrics, Model, RunPrecision, TrainConfig};

fn dfp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfp")).args(args).output().expect("spawning dfp")
}

fn ok(args: &[&str]) -> String {
    let out = dfp(args);
    assert!(
        out.status.success(),
        "dfp {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn repo(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn bench_rows(csv_text: &str) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let headers = r.headers().unwrap().clone();
    assert_eq!(&headers[0], "trial");
    r.records().map(|x| x.unwrap()).collect()
}

fn column(csv_text: &str, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    r.records().map(|x| x.unwrap()[i].to_string()).collect()
}

#[test]
fn quantize_reports_exact_and_bounded_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let (inp, out) = (dir.path().join("x.dft"), dir.path().join("q.dft"));
    let t = FloatTensor::new(vec![3], vec![3.0, -1.5, 0.5]).unwrap();
    dft1::write_path(&inp, &StoredTensor::Float(t)).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["quantize", "--in", p(&inp), "--bits", "16", "--round", "nearest", "--out", p(&out)]))
            .unwrap();
    assert_eq!(report["exponent"], -13);
    assert_eq!(report["max_residual"], 0.0);
    let StoredTensor::Dfp(q) = dft1::read_path(&out).unwrap() else { panic!("expected a DFP tensor") };
    assert_eq!(q.data(), &[24576, -12288, 4096]);

    let v: Vec<f32> = (0..1000).map(|i| ((i * 7919) % 1000) as f32 / 333.0 - 1.5).collect();
    dft1::write_path(&inp, &StoredTensor::Float(FloatTensor::new(vec![1000], v).unwrap())).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&ok(&["quantize", "--in", p(&inp), "--out", p(&out)])).unwrap();
    let (max, bound) = (report["max_residual"].as_f64().unwrap(), report["bound"].as_f64().unwrap());
    assert!(max > 0.0 && max <= bound, "{max} > {bound}");
}

#[test]
fn quantize_rejects_truncated_file_with_offset() {
    let dir = tempfile::tempdir().unwrap();
    let inp = dir.path().join("bad.dft");
    fs::write(&inp, b"DFT1\x00").unwrap();
    let out = dfp(&["quantize", "--in", p(&inp), "--out", p(&dir.path().join("o.dft"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("byte"));
}

#[test]
fn bench_reproduces_overhead_examples() {
    // (spec, icblk, rb, expected converts/FMAs)
    let cases = [
        ("64,16,8,8,3,3,1,1", "64", "4", (1, 72)),
        ("16,16,8,8,1,1,1,0", "16", "1", (1, 2)),
        ("256,16,14,14,3,3,1,1", "256", "28", (1, 288)),
    ];
    for (spec, icblk, rb, (num, den)) in cases {
        let text = ok(&["bench-conv", "--spec", spec, "--icblk", icblk, "--rb", rb, "--no-shadow"]);
        let rows = bench_rows(&text);
        assert_eq!(rows.len(), 1);
        let expected = num as f64 / den as f64;
        for name in ["analytic_ratio", "measured_ratio"] {
            let v: f64 = column(&text, name)[0].parse().unwrap();
            assert!((v - expected).abs() < 1e-12, "{spec} {name}: {v} vs {expected}");
        }
        assert_eq!(column(&text, "ratio_match"), ["true"]);
        assert_eq!(column(&text, "int_exact"), ["true"]);
    }
    let last: f64 = column(&ok(&["bench-conv", "--spec", "256,16,14,14,3,3,1,1", "--icblk", "256", "--rb", "28"]), "measured_ratio")[0]
        .parse()
        .unwrap();
    assert!(last < 0.01);
}

#[test]
fn strict_adversarial_bench_never_overflows() {
    let text = ok(&[
        "bench-gemm", "--m", "32", "--n", "32", "--k", "64", "--policy", "strict", "--chain", "8", "--pre-shift", "1",
        "--data", "adversarial", "--trials", "3",
    ]);
    assert_eq!(bench_rows(&text).len(), 3);
    assert!(column(&text, "overflow_count").iter().all(|c| c == "0"));
    assert!(column(&text, "chain").iter().all(|c| c == "8"));
    assert!(column(&text, "int_exact").iter().all(|c| c == "true"));
}

#[test]
fn empirical_gaussian_bench_never_overflows() {
    let text = ok(&[
        "bench-gemm", "--m", "8", "--n", "16", "--k", "400", "--chain", "200", "--icblk", "200", "--trials", "1000",
    ]);
    assert_eq!(bench_rows(&text).len(), 1000);
    assert!(column(&text, "overflow_count").iter().all(|c| c == "0"));
    assert!(column(&text, "ratio_match").iter().all(|c| c == "true"));
}

#[test]
fn strict_infeasible_blocking_names_safe_chain_length() {
    let out = dfp(&["bench-conv", "--spec", "16,16,8,8,3,3,1,1", "--policy", "strict", "--chain", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("safe_chain_length"));
}

const MLP: &str = r#"{
    "input": [2],
    "layers": [
        {"type": "linear", "out_features": 16},
        {"type": "relu"},
        {"type": "linear", "out_features": 2}
    ],
    "lr": {"base_lr": 0.05},
    "momentum": 0.9,
    "batch_size": 16,
    "epochs": 10,
    "max_iterations": 500,
    "seed": 42
}"#;

fn metrics_without_wall(path: &Path) -> String {
    let mut rows = read_metrics(path).unwrap();
    rows.iter_mut().for_each(|r| r.wall_ms = 0);
    let mut out = Vec::new();
    dfp::train::write_metrics(&rows, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn train_writes_artifacts_and_reproduces_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mlp.json");
    fs::write(&cfg, MLP).unwrap();
    let m1 = dir.path().join("run1.csv");
    let stdout = ok(&["train", "--config", p(&cfg), "--data", "gauss2:n=1000", "--precision", "dfp16", "--out", p(&m1)]);
    assert!(stdout.contains("500 iterations"), "{stdout}");

    let header = fs::read_to_string(&m1).unwrap().lines().next().unwrap().to_string();
    assert!(header.starts_with("iteration,epoch,train_loss,val_acc,overflow_count,wall_ms"), "{header}");
    let rows = read_metrics(&m1).unwrap();
    assert_eq!(rows.len(), 500);
    assert!(rows.iter().all(|r| r.overflow_count == 0));
    let acc = rows.iter().rev().find_map(|r| r.val_acc).unwrap();
    assert!(acc >= 0.99, "validation accuracy {acc}");

    let resolved = dir.path().join("run1.config.json");
    let ckpt = dir.path().join("run1.ckpt");
    assert!(ckpt.join("manifest.json").exists());
    let model = load_checkpoint(&ckpt).unwrap();
    assert_eq!(model.state().len(), 4);

    // Same config and seed: identical metrics apart from timing.
    let m2 = dir.path().join("run2.csv");
    ok(&["train", "--config", p(&cfg), "--data", "gauss2:n=1000", "--out", p(&m2)]);
    assert_eq!(metrics_without_wall(&m1), metrics_without_wall(&m2));

    // Re-running from the resolved config reproduces the run.
    let m3 = dir.path().join("run3.csv");
    ok(&["train", "--config", p(&resolved), "--data", "gauss2:n=1000", "--out", p(&m3)]);
    assert_eq!(metrics_without_wall(&m1), metrics_without_wall(&m3));
    assert_eq!(load_checkpoint(dir.path().join("run3.ckpt")).unwrap().state(), model.state());

    // A different seed changes the run.
    let m4 = dir.path().join("run4.csv");
    ok(&["train", "--config", p(&cfg), "--data", "gauss2:n=1000", "--seed", "7", "--out", p(&m4)]);
    assert_ne!(metrics_without_wall(&m1), metrics_without_wall(&m4));
    assert!(fs::read_to_string(dir.path().join("run4.config.json")).unwrap().contains("\"seed\": 7"));

    // Identical files compare clean.
    let out = ok(&["compare", "--a", p(&m1), "--b", p(&m2)]);
    let report: serde_json::Value = serde_json::from_str(out.trim_end().trim_end_matches("PASS")).unwrap();
    assert_eq!(report["final_acc_delta"], 0.0);
    assert_eq!(report["max_loss_gap"], 0.0);
    assert!(out.trim_end().ends_with("PASS"));
}

#[test]
fn epochs_zero_checkpoint_equals_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("zero.json");
    let text = MLP.replace("\"epochs\": 10", "\"epochs\": 0");
    fs::write(&cfg_path, &text).unwrap();
    let m = dir.path().join("zero.csv");
    ok(&["train", "--config", p(&cfg_path), "--data", "gauss2:n=200", "--out", p(&m)]);
    assert!(read_metrics(&m).unwrap().is_empty());
    let init = Model::build(&TrainConfig::from_json(&text).unwrap(), RunPrecision::Dfp16).unwrap();
    assert_eq!(load_checkpoint(dir.path().join("zero.ckpt")).unwrap().state(), init.state());
}

#[test]
fn compare_flags_a_four_bit_sabotage_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = fs::read_to_string(repo("configs/mnist_cnn.json")).unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&base).unwrap();
    cfg["epochs"] = 2.into();
    cfg["max_iterations"] = 300.into();
    cfg["lr"]["step_epochs"] = 1.into();
    let good = dir.path().join("good.json");
    fs::write(&good, cfg.to_string()).unwrap();
    cfg["quant"] = serde_json::json!({"bits": 4, "rounding": {"mode": "nearest"}, "pre_shift": 0});
    let broken = dir.path().join("broken.json");
    fs::write(&broken, cfg.to_string()).unwrap();

    let data = repo("data/mnist");
    let (a, b) = (dir.path().join("fp32.csv"), dir.path().join("p4.csv"));
    ok(&["train", "--config", p(&good), "--data", p(&data), "--precision", "fp32", "--out", p(&a)]);
    ok(&["train", "--config", p(&broken), "--data", p(&data), "--precision", "dfp16", "--out", p(&b)]);
    let out = dfp(&["compare", "--a", p(&a), "--b", p(&b)]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(1), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(stdout.trim_end().trim_end_matches("FAIL")).unwrap();
    let delta = report["final_acc_delta"].as_f64().unwrap();
    let gap = report["max_loss_gap"].as_f64().unwrap();
    assert!(delta > 0.005 || gap > 0.10, "delta {delta}, gap {gap}");
}

#[test]
fn compare_rejects_mismatched_grids() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let head = "iteration,epoch,train_loss,val_acc,overflow_count,wall_ms,val_loss\n";
    fs::write(&a, format!("{head}1,0,1.0,,0,3,\n2,0,0.5,0.9,0,4,0.4\n")).unwrap();
    fs::write(&b, format!("{head}1,0,1.0,,0,3,\n")).unwrap();
    let out = dfp(&["compare", "--a", p(&a), "--b", p(&b)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));
}

#[test]
fn idx_headers_of_the_bundled_mnist_files() {
    let dir = repo("data/mnist");
    let counts = [
        ("train-images-idx3-ubyte.gz", 8000),
        ("train-labels-idx1-ubyte.gz", 8000),
        ("t10k-images-idx3-ubyte.gz", 2000),
        ("t10k-labels-idx1-ubyte.gz", 2000),
    ];
    for (name, n) in counts {
        let f = read_idx(dir.join(name)).unwrap();
        assert_eq!(f.count(), n, "{name}");
        if let IdxFile::Images { rows, cols, .. } = f {
            assert_eq!((rows, cols), (28, 28));
        }
    }
    let bytes = read_idx_bytes(dir.join("t10k-images-idx3-ubyte.gz")).unwrap();
    assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
    let err = parse_idx(&bytes[..bytes.len() - 1]).unwrap_err().to_string();
    assert!(err.contains(&(bytes.len()).to_string()) && err.contains(&(bytes.len() - 1).to_string()), "{err}");
}
