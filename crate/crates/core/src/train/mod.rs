//! Mixed-precision training: FP32 master weights and solver, DFP forward,
//! backward and weight-gradient kernels, FP32 first/last layers and
//! batch-norm statistics.

pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
mod trainer;

pub use layers::{Activation, Layer, LayerPrecision, Param, PassContext, Sequential};
pub use loss::{LossKind, LossOutput, Targets};
pub use model::{LayerConfig, LrSchedule, Model, PrecisionChoice, RunPrecision, TrainConfig};
pub use trainer::{
    evaluate, load_checkpoint, read_metrics, save_checkpoint, train_loop, write_metrics, Dataset, Evaluation, Manifest,
    ManifestEntry, MetricRow, RunOptions, TrainOutcome,
};

use crate::tensor::FloatTensor;

/// Rows `idx` of a tensor whose first dimension indexes samples.
pub fn gather_rows(t: &FloatTensor, idx: &[usize]) -> FloatTensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * row);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * row..][..row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    FloatTensor::from_raw(shape, data)
}
