//! The training loop, evaluation, metrics and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dft1::{self, StoredTensor};
use crate::error::{DfpError, Result};
use crate::rng::{counter_u64, derive_seed};
use crate::tensor::FloatTensor;
use crate::train::layers::PassContext;
use crate::train::loss::{self, Targets};
use crate::train::model::{Model, RunPrecision, TrainConfig};
use crate::train::gather_rows;

/// Training and validation samples, first dimension indexing samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train_x: FloatTensor,
    pub train_y: Targets,
    pub val_x: FloatTensor,
    pub val_y: Targets,
}

impl Dataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }
}

/// One metrics line per SGD step. Validation columns are filled on the
/// last step of each epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    /// Cumulative count of overflowed accumulator lanes.
    pub overflow_count: u64,
    pub wall_ms: u64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// `None` for regression targets.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Where to write tensors of a diverging layer.
    pub dump_dir: Option<PathBuf>,
    /// Also evaluate the final model on the training set.
    pub eval_train: bool,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<MetricRow>,
    pub final_val: Option<Evaluation>,
    pub final_train: Option<Evaluation>,
}

/// Forward-only pass over `x` in batches of `batch`.
pub fn evaluate(model: &mut Model, x: &FloatTensor, y: &Targets, batch: usize) -> Result<Evaluation> {
    let n = y.len();
    if n == 0 {
        return Err(DfpError::Data("empty evaluation set".into()));
    }
    let (mut loss, mut correct) = (0f64, 0usize);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let mut ctx = PassContext::new(false, u64::MAX, model.policy);
        let out = model.forward(&gather_rows(x, chunk), &mut ctx)?;
        let l = loss::compute(model.config.loss, &out, &y.gather(chunk))?;
        loss += l.loss * chunk.len() as f64;
        correct += l.correct;
    }
    Ok(Evaluation {
        loss: loss / n as f64,
        accuracy: matches!(y, Targets::Classes(_)).then(|| correct as f64 / n as f64),
    })
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(counter_u64(derive_seed(seed, "shuffle"), epoch as u64, 0));
    idx.shuffle(&mut rng);
    idx
}

fn divergence_dump(model: &Model, dir: &Path, layer: Option<&str>, batch: &FloatTensor) -> String {
    let written = model.net.dump(dir, layer).and_then(|mut files| {
        dft1::write_path(dir.join("input.dft"), &StoredTensor::Float(batch.clone()))?;
        files.push("input.dft".into());
        Ok(files)
    });
    match written {
        Ok(files) => format!("; dumped {} to {}", files.join(", "), dir.display()),
        Err(e) => format!("; dump to {} failed: {e}", dir.display()),
    }
}

/// Mini-batch momentum SGD. Both precision modes see the same
/// initialization, batch order and hyperparameters; trailing samples that
/// do not fill a batch are skipped each epoch.
pub fn train_loop(config: &TrainConfig, data: &Dataset, precision: RunPrecision, opts: &RunOptions) -> Result<TrainOutcome> {
    let mut model = Model::build(config, precision)?;
    let n = data.train_len();
    let bs = config.batch_size;
    if n < bs {
        return Err(DfpError::Config(format!("batch size {bs} exceeds the {n} training samples")));
    }
    let start = Instant::now();
    let mut metrics = Vec::new();
    let (mut iteration, mut overflow) = (0u64, 0u64);
    let limit = config.max_iterations.unwrap_or(u64::MAX);
    let mut final_val = None;
    'epochs: for epoch in 0..config.epochs {
        if iteration >= limit {
            break;
        }
        let lr = config.lr.at_epoch(epoch);
        let order = epoch_order(config.seed, epoch, n);
        for idx in order.chunks_exact(bs) {
            let x = gather_rows(&data.train_x, idx);
            let y = data.train_y.gather(idx);
            let mut ctx = PassContext::new(true, iteration, model.policy);
            let out = match model.forward(&x, &mut ctx) {
                Err(DfpError::Divergence { iteration, layer, mut report }) => {
                    if let Some(dir) = &opts.dump_dir {
                        report += &divergence_dump(&model, dir, Some(&layer), &x);
                    }
                    return Err(DfpError::Divergence { iteration, layer, report });
                }
                other => other?,
            };
            let l = loss::compute(config.loss, &out, &y)?;
            if !l.loss.is_finite() {
                let mut report = format!("loss is {}", l.loss);
                if let Some(dir) = &opts.dump_dir {
                    report += &divergence_dump(&model, dir, None, &x);
                }
                return Err(DfpError::Divergence {
                    iteration,
                    layer: "loss".into(),
                    report,
                });
            }
            model.backward(l.grad, &mut ctx)?;
            model.sgd_step(lr)?;
            iteration += 1;
            overflow += ctx.stats.overflow_count;
            metrics.push(MetricRow {
                iteration,
                epoch,
                train_loss: l.loss,
                val_acc: None,
                overflow_count: overflow,
                wall_ms: start.elapsed().as_millis() as u64,
                val_loss: None,
            });
            if iteration >= limit {
                let ev = evaluate(&mut model, &data.val_x, &data.val_y, bs)?;
                annotate(&mut metrics, &ev);
                final_val = Some(ev);
                break 'epochs;
            }
        }
        let ev = evaluate(&mut model, &data.val_x, &data.val_y, bs)?;
        annotate(&mut metrics, &ev);
        final_val = Some(ev);
    }
    let final_train = if opts.eval_train {
        Some(evaluate(&mut model, &data.train_x, &data.train_y, bs)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        model,
        metrics,
        final_val,
        final_train,
    })
}

fn annotate(metrics: &mut [MetricRow], ev: &Evaluation) {
    if let Some(last) = metrics.last_mut() {
        last.val_acc = ev.accuracy;
        last.val_loss = Some(ev.loss);
    }
}

pub fn write_metrics<W: std::io::Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["iteration", "epoch", "train_loss", "val_acc", "overflow_count", "wall_ms", "val_loss"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(DfpError::from)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainConfig,
    pub precision: RunPrecision,
    pub iterations: u64,
    pub tensors: Vec<ManifestEntry>,
}

/// Writes master weights and running statistics as DFT1 files plus a
/// `manifest.json` describing them.
pub fn save_checkpoint(model: &Model, iterations: u64, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, t) in model.state() {
        let file = format!("{name}.dft");
        dft1::write_path(dir.join(&file), &StoredTensor::Float(t.clone()))?;
        tensors.push(ManifestEntry {
            name,
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        config: model.config.clone(),
        precision: model.precision,
        iterations,
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut model = Model::build(&manifest.config, manifest.precision)?;
    let mut state = Vec::new();
    for e in &manifest.tensors {
        match dft1::read_path(dir.join(&e.file))? {
            StoredTensor::Float(t) => state.push((e.name.clone(), t)),
            StoredTensor::Dfp(_) => {
                return Err(DfpError::Config(format!("`{}` is not an FP32 tensor", e.file)));
            }
        }
    }
    model.load_state(&state)?;
    Ok(model)
}
