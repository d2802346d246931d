//! Command implementations behind the `dfp` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::dft1::{self, StoredTensor};
use crate::error::{DfpError, Result};
use crate::harness::data::DatasetHandle;
use crate::tensor::{dequantize, quantize, QuantConfig, RoundingMode};
use crate::train::{read_metrics, save_checkpoint, train_loop, write_metrics, MetricRow, RunOptions, RunPrecision, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizeReport {
    pub elements: usize,
    pub exponent: i32,
    pub bits: u32,
    pub rounding: String,
    pub max_residual: f64,
    pub mean_residual: f64,
    /// `2^(E_s - 1)`, the Nearest-rounding bound.
    pub bound: f64,
    /// Elements clamped to the largest representable magnitude.
    pub saturated: usize,
}

/// Quantizes an FP32 DFT1 file into a DFP DFT1 file.
pub fn cmd_quantize(input: &Path, bits: u32, rounding: RoundingMode, output: &Path) -> Result<QuantizeReport> {
    let t = match dft1::read_path(input)? {
        StoredTensor::Float(t) => t,
        StoredTensor::Dfp(_) => return Err(DfpError::Config(format!("{} already holds a DFP tensor", input.display()))),
    };
    let cfg = QuantConfig::new(bits, rounding, 0)?;
    let q = quantize(&t, &cfg)?;
    let back = dequantize(&q)?;
    let limit = cfg.max_magnitude();
    let (mut max, mut sum) = (0f64, 0f64);
    for (a, b) in t.data().iter().zip(back.data()) {
        let r = (*a as f64 - *b as f64).abs();
        max = max.max(r);
        sum += r;
    }
    let saturated = q.data().iter().filter(|&&v| v as i32 == limit || v as i32 == -limit).count();
    dft1::write_path(output, &StoredTensor::Dfp(q.clone()))?;
    Ok(QuantizeReport {
        elements: t.len(),
        exponent: q.exponent(),
        bits,
        rounding: rounding.to_string(),
        max_residual: max,
        mean_residual: if t.is_empty() { 0.0 } else { sum / t.len() as f64 },
        bound: 2f64.powi(q.exponent() - 1),
        saturated,
    })
}

/// Paths written by a training run. The checkpoint directory and resolved
/// config sit next to the metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub metrics: PathBuf,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
}

impl TrainArtifacts {
    pub fn beside(metrics: &Path) -> Self {
        let stem = metrics.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let dir = metrics.parent().unwrap_or(Path::new(""));
        Self {
            metrics: metrics.to_path_buf(),
            config: dir.join(format!("{stem}.config.json")),
            checkpoint: dir.join(format!("{stem}.ckpt")),
        }
    }
}

/// Runs a full training job and writes metrics, resolved config and
/// checkpoint. `seed` overrides the config's seed.
pub fn cmd_train(
    config: &TrainConfig,
    data: &str,
    precision: RunPrecision,
    seed: Option<u64>,
    metrics: &Path,
) -> Result<(TrainOutcome, TrainArtifacts)> {
    let mut config = config.clone();
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let handle = DatasetHandle::open(data, config.seed)?;
    let paths = TrainArtifacts::beside(metrics);
    if let Some(dir) = paths.metrics.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&paths.config, config.to_json())?;
    let opts = RunOptions {
        dump_dir: Some(paths.checkpoint.with_extension("dump")),
        eval_train: true,
    };
    let outcome = train_loop(&config, &handle.data, precision, &opts)?;
    write_metrics(&outcome.metrics, fs::File::create(&paths.metrics)?)?;
    let iterations = outcome.metrics.last().map_or(0, |r| r.iteration);
    save_checkpoint(&outcome.model, iterations, &paths.checkpoint)?;
    Ok((outcome, paths))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Absolute accuracy difference (0.005 is half a percentage point).
    pub acc: f64,
    /// Relative per-epoch training-loss gap.
    pub loss: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { acc: 0.005, loss: 0.10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochGap {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: f64,
    pub rel_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub final_acc_a: Option<f64>,
    pub final_acc_b: Option<f64>,
    /// `|acc_b - acc_a|`.
    pub final_acc_delta: f64,
    pub epochs: Vec<EpochGap>,
    /// Largest relative gap over epochs after the first.
    pub max_loss_gap: f64,
    /// Final validation loss minus final-epoch mean training loss.
    pub train_val_gap_a: Option<f64>,
    pub train_val_gap_b: Option<f64>,
    pub pass: bool,
}

fn epoch_means(rows: &[MetricRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += r.train_loss;
                *n += 1;
            }
            _ => out.push((r.epoch, r.train_loss, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

fn last_val(rows: &[MetricRow]) -> (Option<f64>, Option<f64>) {
    rows.iter()
        .rev()
        .find(|r| r.val_loss.is_some())
        .map_or((None, None), |r| (r.val_acc, r.val_loss))
}

/// Compares two metric series recorded on the same iteration grid.
pub fn compare_metrics(a: &[MetricRow], b: &[MetricRow], tol: Tolerances) -> Result<CompareReport> {
    let grid = |r: &[MetricRow]| r.iter().map(|m| (m.iteration, m.epoch)).collect::<Vec<_>>();
    if grid(a) != grid(b) {
        return Err(DfpError::Data(format!(
            "iteration grids differ ({} vs {} rows)",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (epoch_means(a), epoch_means(b));
    let epochs: Vec<EpochGap> = ma
        .iter()
        .zip(&mb)
        .map(|(&(epoch, la), &(_, lb))| EpochGap {
            epoch,
            loss_a: la,
            loss_b: lb,
            rel_gap: if la == lb { 0.0 } else { (lb - la).abs() / la.abs().max(f64::MIN_POSITIVE) },
        })
        .collect();
    let max_loss_gap = epochs.iter().filter(|g| g.epoch >= 1).map(|g| g.rel_gap).fold(0.0, f64::max);
    let (acc_a, vl_a) = last_val(a);
    let (acc_b, vl_b) = last_val(b);
    let final_acc_delta = match (acc_a, acc_b) {
        (Some(x), Some(y)) => (y - x).abs(),
        _ => 0.0,
    };
    let tv = |vl: Option<f64>, m: &[(usize, f64)]| Some(vl? - m.last()?.1);
    let nan = !max_loss_gap.is_finite() || !final_acc_delta.is_finite();
    Ok(CompareReport {
        final_acc_a: acc_a,
        final_acc_b: acc_b,
        final_acc_delta,
        train_val_gap_a: tv(vl_a, &ma),
        train_val_gap_b: tv(vl_b, &mb),
        pass: !nan && final_acc_delta <= tol.acc && max_loss_gap <= tol.loss,
        epochs,
        max_loss_gap,
    })
}

pub fn cmd_compare(a: &Path, b: &Path, tol: Tolerances) -> Result<CompareReport> {
    compare_metrics(&read_metrics(a)?, &read_metrics(b)?, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::FloatTensor;

    fn row(iteration: u64, epoch: usize, loss: f64, val: Option<(f64, f64)>) -> MetricRow {
        MetricRow {
            iteration,
            epoch,
            train_loss: loss,
            val_acc: val.map(|v| v.0),
            overflow_count: 0,
            wall_ms: 0,
            val_loss: val.map(|v| v.1),
        }
    }

    fn series(scale: f64, acc: f64) -> Vec<MetricRow> {
        vec![
            row(1, 0, 2.0 * scale, None),
            row(2, 0, 1.0 * scale, Some((0.5, 1.2))),
            row(3, 1, 0.5 * scale, None),
            row(4, 1, 0.3 * scale, Some((acc, 0.5))),
        ]
    }

    #[test]
    fn identical_series_pass_with_zero_gaps() {
        let a = series(1.0, 0.9);
        let r = compare_metrics(&a, &a, Tolerances::default()).unwrap();
        assert!(r.pass);
        assert_eq!(r.final_acc_delta, 0.0);
        assert_eq!(r.max_loss_gap, 0.0);
        assert!((r.train_val_gap_a.unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn gaps_fail_tolerances() {
        let r = compare_metrics(&series(1.0, 0.9), &series(1.2, 0.9), Tolerances::default()).unwrap();
        assert!(!r.pass);
        assert!((r.max_loss_gap - 0.2).abs() < 1e-12);
        let r = compare_metrics(&series(1.0, 0.9), &series(1.0, 0.88), Tolerances::default()).unwrap();
        assert!(!r.pass && (r.final_acc_delta - 0.02).abs() < 1e-12);
    }

    #[test]
    fn first_epoch_gap_is_ignored() {
        let mut b = series(1.0, 0.9);
        b[0].train_loss = 10.0;
        assert!(compare_metrics(&series(1.0, 0.9), &b, Tolerances::default()).unwrap().pass);
    }

    #[test]
    fn mismatched_grids_error() {
        let a = series(1.0, 0.9);
        assert!(compare_metrics(&a, &a[..3], Tolerances::default()).is_err());
    }

    #[test]
    fn quantize_exact_and_zero_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let (inp, out) = (dir.path().join("x.dft"), dir.path().join("q.dft"));
        let t = FloatTensor::new(vec![3], vec![3.0, -1.5, 0.5]).unwrap();
        dft1::write_path(&inp, &StoredTensor::Float(t)).unwrap();
        let r = cmd_quantize(&inp, 16, RoundingMode::Nearest, &out).unwrap();
        assert_eq!((r.exponent, r.max_residual, r.saturated), (-13, 0.0, 0));
        let StoredTensor::Dfp(q) = dft1::read_path(&out).unwrap() else { panic!() };
        assert_eq!(q.data(), &[24576, -12288, 4096]);

        dft1::write_path(&inp, &StoredTensor::Float(FloatTensor::zeros(vec![4]))).unwrap();
        let r = cmd_quantize(&inp, 16, RoundingMode::Nearest, &out).unwrap();
        assert_eq!((r.exponent, r.max_residual), (0, 0.0));
    }

    #[test]
    fn quantize_rejects_malformed_file() {
        let dir = tempfile::tempdir().unwrap();
        let inp = dir.path().join("bad.dft");
        fs::write(&inp, b"DFT1\x00").unwrap();
        let err = cmd_quantize(&inp, 16, RoundingMode::Nearest, &dir.path().join("o.dft")).unwrap_err();
        assert!(err.to_string().contains("byte"), "{err}");
    }
}
