//! FP32 loss functions. Each returns the mean loss and its gradient with
//! respect to the network output.

use serde::{Deserialize, Serialize};

use crate::error::{DfpError, Result};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

/// Training targets for one batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(FloatTensor),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.shape().first().copied().unwrap_or(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows `idx` in order.
    pub fn gather(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => Targets::Values(super::gather_rows(v, idx)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: FloatTensor,
    /// Correct argmax predictions (classification only).
    pub correct: usize,
}

/// Mean softmax cross-entropy over the batch.
pub fn softmax_cross_entropy(logits: &FloatTensor, labels: &[usize]) -> Result<LossOutput> {
    let (n, k) = match *logits.shape() {
        [n, k] if n == labels.len() && k > 0 => (n, k),
        _ => {
            return Err(DfpError::ShapeMismatch {
                left: logits.shape().to_vec(),
                right: vec![labels.len(), 0],
            })
        }
    };
    let mut grad = vec![0f32; n * k];
    let (mut loss, mut correct) = (0f64, 0);
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(DfpError::Data(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[b * k..][..k];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| a.max(v)) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += z.ln() + max - row[y] as f64;
        let argmax = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += (argmax == y) as usize;
        for j in 0..k {
            let p = (row[j] as f64 - max).exp() / z;
            grad[b * k + j] = ((p - (j == y) as u8 as f64) / n as f64) as f32;
        }
    }
    Ok(LossOutput {
        loss: loss / n as f64,
        grad: FloatTensor::from_raw(vec![n, k], grad),
        correct,
    })
}

/// Mean squared error over all elements.
pub fn mse(pred: &FloatTensor, target: &FloatTensor) -> Result<LossOutput> {
    if pred.shape() != target.shape() {
        return Err(DfpError::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let m = pred.len() as f64;
    let mut loss = 0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            loss += d * d;
            (2.0 * d / m) as f32
        })
        .collect();
    Ok(LossOutput {
        loss: loss / m,
        grad: FloatTensor::from_raw(pred.shape().to_vec(), grad),
        correct: 0,
    })
}

pub fn compute(kind: LossKind, out: &FloatTensor, targets: &Targets) -> Result<LossOutput> {
    match (kind, targets) {
        (LossKind::CrossEntropy, Targets::Classes(c)) => softmax_cross_entropy(out, c),
        (LossKind::Mse, Targets::Values(v)) => mse(out, v),
        _ => Err(DfpError::Config(format!("{kind:?} loss does not match the dataset targets"))),
    }
}
