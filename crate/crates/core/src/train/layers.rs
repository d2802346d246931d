//! Layers of the mixed-precision network.
//!
//! Convolution and linear layers run either in FP32 or on DFP operands
//! through the integer kernels. DFP layers consume a quantized activation,
//! quantize the incoming error themselves and always produce FP32 outputs
//! and FP32 weight gradients. Everything else runs in FP32, except max
//! pooling and flattening, which also pass DFP tensors through untouched.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arith::OverflowPolicy;
use crate::dft1::{self, StoredTensor};
use crate::error::{DfpError, Result};
use crate::kernels::{self, BlockingParams, ConvSpec, KernelStats};
use crate::rng::counter_u64;
use crate::tensor::{dequantize, quantize_with_id, DfpTensor, FloatTensor, QuantConfig};
use crate::train::ops::{self, Window};

const ROLE_ACTIVATION: u64 = 0;
const ROLE_ERROR: u64 = 1;
const ROLE_WEIGHT: u64 = 2;

/// Numeric treatment of one compute layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerPrecision {
    Fp32,
    Dfp(QuantConfig),
}

impl LayerPrecision {
    pub fn quant(&self) -> Option<QuantConfig> {
        match self {
            LayerPrecision::Fp32 => None,
            LayerPrecision::Dfp(q) => Some(*q),
        }
    }
}

/// A tensor flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Activation {
    Float(FloatTensor),
    Dfp(DfpTensor),
}

impl Activation {
    pub fn shape(&self) -> &[usize] {
        match self {
            Activation::Float(t) => t.shape(),
            Activation::Dfp(t) => t.shape(),
        }
    }

    pub fn into_float(self) -> Result<FloatTensor> {
        match self {
            Activation::Float(t) => Ok(t),
            Activation::Dfp(t) => dequantize(&t),
        }
    }
}

/// Per-pass state threaded through the layers.
#[derive(Debug, Clone)]
pub struct PassContext {
    pub training: bool,
    pub iteration: u64,
    pub policy: OverflowPolicy,
    /// Kernel counters accumulated over the pass.
    pub stats: KernelStats,
}

impl PassContext {
    pub fn new(training: bool, iteration: u64, policy: OverflowPolicy) -> Self {
        Self {
            training,
            iteration,
            policy,
            stats: KernelStats::default(),
        }
    }

    fn tensor_id(&self, uid: u64, role: u64) -> u64 {
        counter_u64(self.iteration, uid, role)
    }
}

/// A trainable tensor: FP32 master copy plus its DFP shadow.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: FloatTensor,
    pub grad: FloatTensor,
    pub velocity: FloatTensor,
    /// Quantizer for the DFP copy; `None` for FP32 layers and biases.
    pub quant: Option<QuantConfig>,
    quantized: Option<DfpTensor>,
    pub decay: bool,
    uid: u64,
    updates: u64,
}

impl Param {
    pub fn new(name: String, value: FloatTensor, quant: Option<QuantConfig>, decay: bool, uid: u64) -> Result<Self> {
        let shape = value.shape().to_vec();
        let mut p = Self {
            name,
            value,
            grad: FloatTensor::zeros(shape.clone()),
            velocity: FloatTensor::zeros(shape),
            quant,
            quantized: None,
            decay,
            uid,
            updates: 0,
        };
        p.requantize()?;
        Ok(p)
    }

    /// The DFP copy `Q_w(W)`; present exactly when `quant` is set.
    pub fn quantized(&self) -> Option<&DfpTensor> {
        self.quantized.as_ref()
    }

    /// Recomputes the DFP copy from the master weights.
    pub fn requantize(&mut self) -> Result<()> {
        self.quantized = match &self.quant {
            Some(q) => Some(quantize_with_id(
                &self.value,
                q,
                counter_u64(self.updates, self.uid, ROLE_WEIGHT),
            )?),
            None => None,
        };
        Ok(())
    }

    /// One momentum-SGD step on the master weights, then `Q_w`.
    ///
    /// `v = momentum * v + (g + wd * W)`, `W -= lr * v`.
    pub fn sgd_step(&mut self, lr: f32, momentum: f32, weight_decay: f32) -> Result<()> {
        if self.grad.shape() != self.value.shape() {
            return Err(DfpError::ShapeMismatch {
                left: self.grad.shape().to_vec(),
                right: self.value.shape().to_vec(),
            });
        }
        if self.grad.first_non_finite().is_some() {
            return Err(DfpError::NonFiniteGradient(self.name.clone()));
        }
        let wd = if self.decay { weight_decay } else { 0.0 };
        let w = self.value.data_mut();
        let v = self.velocity.data_mut();
        for ((w, v), &g) in w.iter_mut().zip(v.iter_mut()).zip(self.grad.data()) {
            *v = momentum * *v + (g + wd * *w);
            *w -= lr * *v;
        }
        self.updates += 1;
        self.requantize()
    }
}

fn he_normal<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> FloatTensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
    FloatTensor::from_raw(shape, (0..n).map(|_| dist.sample(rng)).collect())
}

fn mismatch(layer: &str, reason: impl Into<String>) -> DfpError {
    DfpError::PrecisionMismatch {
        layer: layer.to_string(),
        reason: reason.into(),
    }
}

fn check_operand(layer: &str, x: &DfpTensor, q: &QuantConfig) -> Result<()> {
    if x.bits() != q.bits {
        return Err(mismatch(layer, format!("{}-bit input to a {}-bit layer", x.bits(), q.bits)));
    }
    if x.max_abs() > q.max_magnitude() as u32 {
        return Err(mismatch(
            layer,
            format!("input magnitude {} exceeds the pre-shifted limit {}", x.max_abs(), q.max_magnitude()),
        ));
    }
    Ok(())
}

fn run_gemm(a: &DfpTensor, b: &DfpTensor, ctx: &mut PassContext) -> Result<FloatTensor> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let blk = BlockingParams::default_for(&ConvSpec::gemm(m, n, k)?, &ctx.policy);
    let out = kernels::gemm_dfp(a, b, &blk, &ctx.policy)?;
    ctx.stats += out.stats;
    Ok(out.output)
}

fn add_channel_bias(y: &mut [f32], bias: &[f32], plane: usize) {
    for (i, v) in y.iter_mut().enumerate() {
        *v += bias[(i / plane) % bias.len()];
    }
}

fn channel_sums(g: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    let mut s = vec![0f64; channels];
    for (i, v) in g.iter().enumerate() {
        s[(i / plane) % channels] += *v as f64;
    }
    s.into_iter().map(|v| v as f32).collect()
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub precision: LayerPrecision,
    pub weight: Param,
    pub bias: Param,
    uid: u64,
    cache: Option<Activation>,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        precision: LayerPrecision,
        uid: u64,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 || padding >= kernel.max(1) {
            return Err(DfpError::Config(format!(
                "layer `{name}`: need kernel >= 1, stride >= 1 and padding < kernel"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let w = he_normal(rng, vec![out_channels, in_channels, kernel, kernel], fan_in);
        let weight = Param::new(format!("{name}.weight"), w, precision.quant(), true, uid)?;
        let bias = Param::new(format!("{name}.bias"), FloatTensor::zeros(vec![out_channels]), None, false, uid)?;
        Ok(Self {
            name,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            precision,
            weight,
            bias,
            uid,
            cache: None,
        })
    }

    fn window(&self, shape: &[usize]) -> Result<Window> {
        match *shape {
            [n, c, h, w] if c == self.in_channels && h + 2 * self.padding >= self.kernel && w + 2 * self.padding >= self.kernel => {
                Ok(Window {
                    batch: n,
                    channels: c,
                    height: h,
                    width: w,
                    kernel: self.kernel,
                    stride: self.stride,
                    padding: self.padding,
                })
            }
            _ => Err(DfpError::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![0, self.in_channels, self.kernel, self.kernel],
            }),
        }
    }

    fn spec(&self, g: &Window) -> Result<ConvSpec> {
        ConvSpec::new(
            self.in_channels,
            self.out_channels,
            g.height,
            g.width,
            self.kernel,
            self.kernel,
            self.stride,
            self.padding,
        )
    }

    pub fn forward(&mut self, x: Activation, ctx: &mut PassContext) -> Result<Activation> {
        let g = self.window(x.shape())?;
        let (k, p) = (self.out_channels, g.out_h() * g.out_w());
        let mut y = match (&self.precision, &x) {
            (LayerPrecision::Fp32, Activation::Float(xf)) => {
                let cols = ops::im2col(xf.data(), &g);
                let rows = ops::matmul(&cols, false, self.weight.value.data(), true, g.patches(), g.patch_len(), k);
                ops::rows_to_nkp(&rows, g.batch, k, p)
            }
            (LayerPrecision::Dfp(q), Activation::Dfp(xq)) => {
                check_operand(&self.name, xq, q)?;
                let spec = self.spec(&g)?;
                let wq = self.weight.quantized().expect("DFP layer keeps a DFP weight copy");
                let packed = kernels::pack_weights(wq, &spec)?;
                let blk = BlockingParams::default_for(&spec, &ctx.policy);
                let out = kernels::conv_fprop(xq, &packed, &spec, &blk, &ctx.policy)?;
                ctx.stats += out.stats;
                out.output.into_data()
            }
            (LayerPrecision::Fp32, _) => return Err(mismatch(&self.name, "FP32 layer received a DFP tensor")),
            (LayerPrecision::Dfp(_), _) => return Err(mismatch(&self.name, "DFP layer received an FP32 tensor")),
        };
        add_channel_bias(&mut y, self.bias.value.data(), p);
        self.cache = ctx.training.then_some(x);
        Ok(Activation::Float(FloatTensor::from_raw(
            vec![g.batch, k, g.out_h(), g.out_w()],
            y,
        )))
    }

    pub fn backward(&mut self, grad: FloatTensor, need_input_grad: bool, ctx: &mut PassContext) -> Result<Option<FloatTensor>> {
        let x = self.cache.take().ok_or_else(|| DfpError::MissingCache(self.name.clone()))?;
        let g = self.window(x.shape())?;
        let (k, p) = (self.out_channels, g.out_h() * g.out_w());
        if grad.shape() != [g.batch, k, g.out_h(), g.out_w()] {
            return Err(DfpError::ShapeMismatch {
                left: grad.shape().to_vec(),
                right: vec![g.batch, k, g.out_h(), g.out_w()],
            });
        }
        self.bias.grad = FloatTensor::from_raw(vec![k], channel_sums(grad.data(), k, p));
        let wshape = self.weight.value.shape().to_vec();
        match (&self.precision, &x) {
            (LayerPrecision::Fp32, Activation::Float(xf)) => {
                let cols = ops::im2col(xf.data(), &g);
                let rows = ops::nkp_to_rows(grad.data(), g.batch, k, p);
                let dw = ops::matmul(&rows, true, &cols, false, k, g.patches(), g.patch_len());
                self.weight.grad = FloatTensor::from_raw(wshape, dw);
                if !need_input_grad {
                    return Ok(None);
                }
                let dcols = ops::matmul(&rows, false, self.weight.value.data(), false, g.patches(), k, g.patch_len());
                let dx = ops::col2im(&dcols, &g);
                Ok(Some(FloatTensor::from_raw(x.shape().to_vec(), dx)))
            }
            (LayerPrecision::Dfp(q), Activation::Dfp(xq)) => {
                let eq = quantize_with_id(&grad, q, ctx.tensor_id(self.uid, ROLE_ERROR))?;
                // Weight update: E (K x NP) * im2col(X) (NP x CKK).
                let a = eq.with_data(vec![k, g.patches()], ops::nkp_to_knp(eq.data(), g.batch, k, p));
                let b = xq.with_data(vec![g.patches(), g.patch_len()], ops::im2col(xq.data(), &g));
                let dw = run_gemm(&a, &b, ctx)?;
                self.weight.grad = dw.reshape(wshape)?;
                if !need_input_grad {
                    return Ok(None);
                }
                let wq = self.weight.quantized().expect("DFP layer keeps a DFP weight copy");
                self.backward_data(&eq, wq, &g, ctx).map(Some)
            }
            _ => Err(mismatch(&self.name, "cached activation does not match layer precision")),
        }
    }

    /// Input gradient as a forward convolution of the stride-dilated error
    /// with the flipped, channel-swapped weights.
    fn backward_data(&self, eq: &DfpTensor, wq: &DfpTensor, g: &Window, ctx: &mut PassContext) -> Result<FloatTensor> {
        let (kk, s, c, k) = (self.kernel, self.stride, self.in_channels, self.out_channels);
        let (oh, ow) = (g.out_h(), g.out_w());
        let hd = (oh - 1) * s + 1 + (g.height + 2 * g.padding - kk) % s;
        let wd = (ow - 1) * s + 1 + (g.width + 2 * g.padding - kk) % s;
        let mut dil = vec![0i16; g.batch * k * hd * wd];
        for plane in 0..g.batch * k {
            for y in 0..oh {
                for x in 0..ow {
                    dil[(plane * hd + y * s) * wd + x * s] = eq.data()[(plane * oh + y) * ow + x];
                }
            }
        }
        let mut rot = vec![0i16; wq.len()];
        for ko in 0..k {
            for ci in 0..c {
                for r in 0..kk {
                    for q in 0..kk {
                        rot[((ci * k + ko) * kk + r) * kk + q] =
                            wq.data()[((ko * c + ci) * kk + kk - 1 - r) * kk + kk - 1 - q];
                    }
                }
            }
        }
        let spec = ConvSpec::new(k, c, hd, wd, kk, kk, 1, kk - 1 - g.padding)?;
        let input = eq.with_data(vec![g.batch, k, hd, wd], dil);
        let filters = wq.with_data(vec![c, k, kk, kk], rot);
        let packed = kernels::pack_weights(&filters, &spec)?;
        let blk = BlockingParams::default_for(&spec, &ctx.policy);
        let out = kernels::conv_fprop(&input, &packed, &spec, &blk, &ctx.policy)?;
        ctx.stats += out.stats;
        Ok(out.output)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
    pub precision: LayerPrecision,
    pub weight: Param,
    pub bias: Param,
    uid: u64,
    cache: Option<Activation>,
}

impl Linear {
    pub fn new<R: Rng>(
        name: String,
        in_features: usize,
        out_features: usize,
        precision: LayerPrecision,
        uid: u64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = he_normal(rng, vec![out_features, in_features], in_features);
        Self::from_weights(name, w, FloatTensor::zeros(vec![out_features]), precision, uid)
    }

    /// A layer with given `(out, in)` weights and `(out)` bias.
    pub fn from_weights(
        name: String,
        weight: FloatTensor,
        bias: FloatTensor,
        precision: LayerPrecision,
        uid: u64,
    ) -> Result<Self> {
        let (out_features, in_features) = match *weight.shape() {
            [o, i] if bias.shape() == [o] => (o, i),
            _ => {
                return Err(DfpError::ShapeMismatch {
                    left: weight.shape().to_vec(),
                    right: bias.shape().to_vec(),
                })
            }
        };
        Ok(Self {
            weight: Param::new(format!("{name}.weight"), weight, precision.quant(), true, uid)?,
            bias: Param::new(format!("{name}.bias"), bias, None, false, uid)?,
            name,
            in_features,
            out_features,
            precision,
            uid,
            cache: None,
        })
    }

    fn batch(&self, shape: &[usize]) -> Result<usize> {
        match *shape {
            [n, f] if f == self.in_features => Ok(n),
            _ => Err(DfpError::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![0, self.in_features],
            }),
        }
    }

    pub fn forward(&mut self, x: Activation, ctx: &mut PassContext) -> Result<Activation> {
        let n = self.batch(x.shape())?;
        let (i, o) = (self.in_features, self.out_features);
        let mut y = match (&self.precision, &x) {
            (LayerPrecision::Fp32, Activation::Float(xf)) => {
                ops::matmul(xf.data(), false, self.weight.value.data(), true, n, i, o)
            }
            (LayerPrecision::Dfp(q), Activation::Dfp(xq)) => {
                check_operand(&self.name, xq, q)?;
                let wt = self.weight.quantized().expect("DFP layer keeps a DFP weight copy").transpose2d()?;
                run_gemm(xq, &wt, ctx)?.into_data()
            }
            (LayerPrecision::Fp32, _) => return Err(mismatch(&self.name, "FP32 layer received a DFP tensor")),
            (LayerPrecision::Dfp(_), _) => return Err(mismatch(&self.name, "DFP layer received an FP32 tensor")),
        };
        add_channel_bias(&mut y, self.bias.value.data(), 1);
        self.cache = ctx.training.then_some(x);
        Ok(Activation::Float(FloatTensor::from_raw(vec![n, o], y)))
    }

    pub fn backward(&mut self, grad: FloatTensor, need_input_grad: bool, ctx: &mut PassContext) -> Result<Option<FloatTensor>> {
        let x = self.cache.take().ok_or_else(|| DfpError::MissingCache(self.name.clone()))?;
        let n = self.batch(x.shape())?;
        let (i, o) = (self.in_features, self.out_features);
        if grad.shape() != [n, o] {
            return Err(DfpError::ShapeMismatch {
                left: grad.shape().to_vec(),
                right: vec![n, o],
            });
        }
        self.bias.grad = FloatTensor::from_raw(vec![o], channel_sums(grad.data(), o, 1));
        match (&self.precision, &x) {
            (LayerPrecision::Fp32, Activation::Float(xf)) => {
                let dw = ops::matmul(grad.data(), true, xf.data(), false, o, n, i);
                self.weight.grad = FloatTensor::from_raw(vec![o, i], dw);
                Ok(need_input_grad.then(|| {
                    let dx = ops::matmul(grad.data(), false, self.weight.value.data(), false, n, o, i);
                    FloatTensor::from_raw(vec![n, i], dx)
                }))
            }
            (LayerPrecision::Dfp(q), Activation::Dfp(xq)) => {
                let eq = quantize_with_id(&grad, q, ctx.tensor_id(self.uid, ROLE_ERROR))?;
                self.weight.grad = run_gemm(&eq.transpose2d()?, xq, ctx)?;
                if !need_input_grad {
                    return Ok(None);
                }
                let wq = self.weight.quantized().expect("DFP layer keeps a DFP weight copy");
                run_gemm(&eq, wq, ctx).map(Some)
            }
            _ => Err(mismatch(&self.name, "cached activation does not match layer precision")),
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    shape: Vec<usize>,
}

/// Batch normalization with FP32 statistics and FP32 gradients.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(name: String, channels: usize, eps: f32, momentum: f32, uid: u64) -> Result<Self> {
        let ones = FloatTensor::new(vec![channels], vec![1.0; channels])?;
        Ok(Self {
            gamma: Param::new(format!("{name}.gamma"), ones, None, false, uid)?,
            beta: Param::new(format!("{name}.beta"), FloatTensor::zeros(vec![channels]), None, false, uid)?,
            name,
            channels,
            eps,
            momentum,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        })
    }

    /// `(batch, plane)` where `plane` is the spatial size per channel.
    fn geometry(&self, shape: &[usize]) -> Result<(usize, usize)> {
        if shape.len() >= 2 && shape[1] == self.channels {
            Ok((shape[0], shape[2..].iter().product()))
        } else {
            Err(DfpError::ShapeMismatch {
                left: shape.to_vec(),
                right: vec![0, self.channels],
            })
        }
    }

    pub fn forward(&mut self, x: Activation, ctx: &mut PassContext) -> Result<Activation> {
        let x = x.into_float()?;
        let (n, plane) = self.geometry(x.shape())?;
        let c = self.channels;
        let idx = |b: usize, ch: usize, i: usize| (b * c + ch) * plane + i;
        let (mean, var) = if ctx.training {
            if n < 2 {
                return Err(DfpError::Config(format!(
                    "layer `{}` needs a minibatch of at least 2 in training",
                    self.name
                )));
            }
            let m = (n * plane) as f64;
            let mut mean = vec![0f32; c];
            let mut var = vec![0f32; c];
            for ch in 0..c {
                let vals = (0..n).flat_map(|b| (0..plane).map(move |i| (b, i)));
                let mu = vals.clone().map(|(b, i)| x.data()[idx(b, ch, i)] as f64).sum::<f64>() / m;
                let v = vals.map(|(b, i)| (x.data()[idx(b, ch, i)] as f64 - mu).powi(2)).sum::<f64>() / m;
                mean[ch] = mu as f32;
                var[ch] = v as f32;
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
            }
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0f32; x.len()];
        let mut y = vec![0f32; x.len()];
        for (j, (&v, (h, o))) in x.data().iter().zip(xhat.iter_mut().zip(y.iter_mut())).enumerate() {
            let ch = (j / plane) % c;
            *h = (v - mean[ch]) * inv_std[ch];
            *o = self.gamma.value.data()[ch] * *h + self.beta.value.data()[ch];
        }
        let shape = x.shape().to_vec();
        if ctx.training {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                shape: shape.clone(),
            });
        }
        Ok(Activation::Float(FloatTensor::from_raw(shape, y)))
    }

    pub fn backward(&mut self, grad: FloatTensor) -> Result<FloatTensor> {
        let cache = self.cache.take().ok_or_else(|| DfpError::MissingCache(self.name.clone()))?;
        if grad.shape() != cache.shape.as_slice() {
            return Err(DfpError::ShapeMismatch {
                left: grad.shape().to_vec(),
                right: cache.shape,
            });
        }
        let (n, plane) = self.geometry(&cache.shape)?;
        let c = self.channels;
        let m = (n * plane) as f64;
        let mut dgamma = vec![0f64; c];
        let mut dbeta = vec![0f64; c];
        for (j, (&g, &h)) in grad.data().iter().zip(&cache.xhat).enumerate() {
            let ch = (j / plane) % c;
            dgamma[ch] += g as f64 * h as f64;
            dbeta[ch] += g as f64;
        }
        let dx = grad
            .data()
            .iter()
            .zip(&cache.xhat)
            .enumerate()
            .map(|(j, (&g, &h))| {
                let ch = (j / plane) % c;
                let scale = self.gamma.value.data()[ch] as f64 * cache.inv_std[ch] as f64 / m;
                (scale * (m * g as f64 - dbeta[ch] - h as f64 * dgamma[ch])) as f32
            })
            .collect();
        self.gamma.grad = FloatTensor::from_raw(vec![c], dgamma.into_iter().map(|v| v as f32).collect());
        self.beta.grad = FloatTensor::from_raw(vec![c], dbeta.into_iter().map(|v| v as f32).collect());
        Ok(FloatTensor::from_raw(cache.shape, dx))
    }
}

/// One network layer.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv),
    Linear(Linear),
    BatchNorm(BatchNorm),
    Relu { name: String, mask: Option<Vec<bool>> },
    MaxPool { name: String, size: usize, cache: Option<(Vec<usize>, Vec<usize>)> },
    AvgPool { name: String, size: usize, cache: Option<Vec<usize>> },
    Flatten { name: String, cache: Option<Vec<usize>> },
    Residual { name: String, body: Sequential },
}

fn pool_shape(name: &str, shape: &[usize], size: usize) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] if size > 0 && h >= size && w >= size => Ok([n, c, h, w]),
        _ => Err(DfpError::Config(format!(
            "layer `{name}` cannot pool {shape:?} with window {size}"
        ))),
    }
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::Linear(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::Relu { name, .. }
            | Layer::MaxPool { name, .. }
            | Layer::AvgPool { name, .. }
            | Layer::Flatten { name, .. }
            | Layer::Residual { name, .. } => name,
        }
    }

    /// Quantizer of a DFP compute layer.
    pub fn dfp_input(&self) -> Option<QuantConfig> {
        match self {
            Layer::Conv(l) => l.precision.quant(),
            Layer::Linear(l) => l.precision.quant(),
            _ => None,
        }
    }

    /// Layers that carry a DFP tensor through without arithmetic.
    pub fn passes_dfp(&self) -> bool {
        matches!(self, Layer::MaxPool { .. } | Layer::Flatten { .. })
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Residual { body, .. } => body.params(),
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Residual { body, .. } => body.params_mut(),
            _ => Vec::new(),
        }
    }

    pub fn forward(&mut self, x: Activation, ctx: &mut PassContext) -> Result<Activation> {
        match self {
            Layer::Conv(l) => l.forward(x, ctx),
            Layer::Linear(l) => l.forward(x, ctx),
            Layer::BatchNorm(l) => l.forward(x, ctx),
            Layer::Relu { mask, .. } => {
                let mut x = x.into_float()?;
                let m: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
                x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                *mask = ctx.training.then_some(m);
                Ok(Activation::Float(x))
            }
            Layer::MaxPool { name, size, cache } => {
                let shape = pool_shape(name, x.shape(), *size)?;
                let [n, c, h, w] = shape;
                let out_shape = vec![n, c, h / *size, w / *size];
                let (out, arg) = match &x {
                    Activation::Float(t) => {
                        let (v, a) = ops::max_pool(t.data(), shape, *size);
                        (Activation::Float(FloatTensor::from_raw(out_shape, v)), a)
                    }
                    // A shared exponent preserves order, so the integer max
                    // is the max of the represented values.
                    Activation::Dfp(t) => {
                        let (v, a) = ops::max_pool(t.data(), shape, *size);
                        (Activation::Dfp(t.with_data(out_shape, v)), a)
                    }
                };
                *cache = ctx.training.then(|| (shape.to_vec(), arg));
                Ok(out)
            }
            Layer::AvgPool { name, size, cache } => {
                let shape = pool_shape(name, x.shape(), *size)?;
                let [n, c, h, w] = shape;
                let x = x.into_float()?;
                let v = ops::avg_pool(x.data(), shape, *size);
                *cache = ctx.training.then(|| shape.to_vec());
                Ok(Activation::Float(FloatTensor::from_raw(vec![n, c, h / *size, w / *size], v)))
            }
            Layer::Flatten { cache, .. } => {
                let shape = x.shape().to_vec();
                let flat = vec![shape[0], shape[1..].iter().product()];
                *cache = ctx.training.then(|| shape.clone());
                Ok(match x {
                    Activation::Float(t) => Activation::Float(t.reshape(flat)?),
                    Activation::Dfp(t) => Activation::Dfp(t.reshape(flat)?),
                })
            }
            Layer::Residual { name, body } => {
                let skip = x.clone().into_float()?;
                let y = body.forward(x, ctx)?.into_float()?;
                if y.shape() != skip.shape() {
                    return Err(DfpError::Config(format!(
                        "residual `{name}` body maps {:?} to {:?}",
                        skip.shape(),
                        y.shape()
                    )));
                }
                let mut out = y;
                out.data_mut().iter_mut().zip(skip.data()).for_each(|(o, s)| *o += s);
                Ok(Activation::Float(out))
            }
        }
    }

    /// Returns the input gradient, or `None` when `need_input_grad` is false
    /// and the layer could skip it.
    pub fn backward(&mut self, grad: FloatTensor, need_input_grad: bool, ctx: &mut PassContext) -> Result<Option<FloatTensor>> {
        let missing = |name: &str| DfpError::MissingCache(name.to_string());
        match self {
            Layer::Conv(l) => l.backward(grad, need_input_grad, ctx),
            Layer::Linear(l) => l.backward(grad, need_input_grad, ctx),
            Layer::BatchNorm(l) => l.backward(grad).map(Some),
            Layer::Relu { name, mask } => {
                let m = mask.take().ok_or_else(|| missing(name))?;
                let mut g = grad;
                g.data_mut().iter_mut().zip(m).for_each(|(v, keep)| {
                    if !keep {
                        *v = 0.0
                    }
                });
                Ok(Some(g))
            }
            Layer::MaxPool { name, cache, .. } => {
                let (shape, arg) = cache.take().ok_or_else(|| missing(name))?;
                let mut dx = vec![0f32; shape.iter().product()];
                for (&i, &g) in arg.iter().zip(grad.data()) {
                    dx[i] += g;
                }
                Ok(Some(FloatTensor::from_raw(shape, dx)))
            }
            Layer::AvgPool { name, size, cache } => {
                let shape = cache.take().ok_or_else(|| missing(name))?;
                let s4 = [shape[0], shape[1], shape[2], shape[3]];
                Ok(Some(FloatTensor::from_raw(shape, ops::avg_pool_backward(grad.data(), s4, *size))))
            }
            Layer::Flatten { name, cache } => {
                let shape = cache.take().ok_or_else(|| missing(name))?;
                grad.reshape(shape).map(Some)
            }
            Layer::Residual { body, .. } => {
                let gb = body.backward(grad.clone(), true, ctx)?.expect("input gradient requested");
                let mut g = grad;
                g.data_mut().iter_mut().zip(gb.data()).for_each(|(a, b)| *a += b);
                Ok(Some(g))
            }
        }
    }

    fn uid_hint(&self) -> u64 {
        match self {
            Layer::Conv(l) => l.uid,
            Layer::Linear(l) => l.uid,
            _ => 0,
        }
    }
}

/// A chain of layers with activation quantizers placed in front of each
/// DFP compute layer, hoisted over any preceding max-pool/flatten layers.
#[derive(Debug, Clone)]
pub struct Sequential {
    layers: Vec<Layer>,
    quantize_before: Vec<Option<(QuantConfig, u64)>>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        let mut quantize_before = vec![None; layers.len()];
        for j in 0..layers.len() {
            if j > 0 && layers[j - 1].passes_dfp() {
                continue;
            }
            let k = (j..layers.len()).find(|&k| !layers[k].passes_dfp());
            if let Some(k) = k {
                if let Some(q) = layers[k].dfp_input() {
                    quantize_before[j] = Some((q, layers[k].uid_hint()));
                }
            }
        }
        Self {
            layers,
            quantize_before,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Indices of layers whose input is quantized by `Q_a`.
    pub fn activation_quantizers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.quantize_before[i].is_some()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn forward(&mut self, mut x: Activation, ctx: &mut PassContext) -> Result<Activation> {
        for (layer, q) in self.layers.iter_mut().zip(&self.quantize_before) {
            if let (Some((q, uid)), Activation::Float(f)) = (q, &x) {
                x = Activation::Dfp(quantize_with_id(f, q, ctx.tensor_id(*uid, ROLE_ACTIVATION))?);
            }
            x = layer.forward(x, ctx)?;
            if let Activation::Float(t) = &x {
                if let Some(i) = t.first_non_finite() {
                    return Err(DfpError::Divergence {
                        iteration: ctx.iteration,
                        layer: layer.name().to_string(),
                        report: format!(
                            "output element {i} of {:?} is {} ({} non-finite of {})",
                            t.shape(),
                            t.data()[i],
                            t.data().iter().filter(|v| !v.is_finite()).count(),
                            t.len()
                        ),
                    });
                }
            }
        }
        Ok(x)
    }

    pub fn backward(&mut self, mut grad: FloatTensor, need_input_grad: bool, ctx: &mut PassContext) -> Result<Option<FloatTensor>> {
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            match layer.backward(grad, need_input_grad || i > 0, ctx)? {
                Some(g) => grad = g,
                None => return Ok(None),
            }
            if grad.first_non_finite().is_some() {
                return Err(DfpError::NonFiniteGradient(format!("input of {}", layer.name())));
            }
        }
        Ok(Some(grad))
    }

    /// Writes every parameter of layer `name` (or all layers when `None`)
    /// to `dir` as DFT1 files.
    pub fn dump(&self, dir: &Path, name: Option<&str>) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for p in self.params() {
            if name.is_some_and(|n| !p.name.starts_with(&format!("{n}."))) {
                continue;
            }
            for (suffix, t) in [("", &p.value), (".grad", &p.grad)] {
                let file = format!("{}{suffix}.dft", p.name);
                dft1::write_path(&dir.join(&file), &StoredTensor::Float(t.clone()))?;
                written.push(file);
            }
            if let Some(q) = p.quantized() {
                let file = format!("{}.q.dft", p.name);
                dft1::write_path(&dir.join(&file), &StoredTensor::Dfp(q.clone()))?;
                written.push(file);
            }
        }
        Ok(written)
    }
}
