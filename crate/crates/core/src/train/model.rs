//! Model configuration and construction.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arith::{shadow_check_default, ChainPolicy, OverflowPolicy};
use crate::error::{DfpError, Result};
use crate::rng::derive_seed;
use crate::tensor::{FloatTensor, QuantConfig};
use crate::train::layers::{Activation, BatchNorm, Conv, Layer, LayerPrecision, Linear, Param, PassContext, Sequential};
use crate::train::loss::LossKind;

/// Per-layer precision request, resolved against the run precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionChoice {
    Fp32,
    Dfp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    /// Square `kernel x kernel` convolution. DFP by default.
    Conv {
        out_channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        precision: Option<PrecisionChoice>,
    },
    /// Fully connected layer. FP32 by default.
    Linear {
        out_features: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        precision: Option<PrecisionChoice>,
    },
    BatchNorm {
        #[serde(default = "bn_eps")]
        eps: f32,
        #[serde(default = "bn_momentum")]
        momentum: f32,
    },
    Relu {},
    MaxPool {
        size: usize,
    },
    AvgPool {
        size: usize,
    },
    Flatten {},
    /// `x + body(x)`, added in FP32.
    Residual {
        body: Vec<LayerConfig>,
    },
}

fn one() -> usize {
    1
}

fn bn_eps() -> f32 {
    1e-5
}

fn bn_momentum() -> f32 {
    0.1
}

/// Step decay: `base_lr * gamma^(epoch / step_epochs)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f32,
    #[serde(default = "unit")]
    pub gamma: f32,
    /// Zero disables decay.
    #[serde(default)]
    pub step_epochs: usize,
}

fn unit() -> f32 {
    1.0
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f32 {
        if self.step_epochs == 0 {
            self.base_lr
        } else {
            self.base_lr * self.gamma.powi((epoch / self.step_epochs) as i32)
        }
    }
}

/// Everything that defines a training run apart from the data and the run
/// precision. The same file drives both precision modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[2]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerConfig>,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    /// Quantizer used by every DFP layer; 16 bits with one bit of
    /// accumulation headroom unless overridden.
    #[serde(default = "QuantConfig::dfp15")]
    pub quant: QuantConfig,
    #[serde(default)]
    pub policy: ChainPolicy,
    /// Overrides the build-dependent default of the 64-bit overflow shadow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shadow_check: Option<bool>,
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f32,
    #[serde(default)]
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops early after this many SGD steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_loss() -> LossKind {
    LossKind::CrossEntropy
}

impl TrainConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.quant.validate()?;
        if self.input.is_empty() || self.input.contains(&0) {
            return Err(DfpError::Config(format!("bad input shape {:?}", self.input)));
        }
        if self.batch_size == 0 {
            return Err(DfpError::Config("batch_size must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(DfpError::Config("model has no layers".into()));
        }
        let finite = [self.lr.base_lr, self.lr.gamma, self.momentum, self.weight_decay];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DfpError::Config("learning rate, gamma, momentum and decay must be finite and >= 0".into()));
        }
        match self.policy {
            ChainPolicy::Strict { max_chain } => {
                OverflowPolicy::strict(max_chain, self.quant.bits, self.quant.pre_shift)?;
            }
            ChainPolicy::Empirical { chain_block } => {
                OverflowPolicy::empirical(chain_block)?;
            }
        }
        Ok(())
    }

    pub fn overflow_policy(&self) -> OverflowPolicy {
        OverflowPolicy {
            chain: self.policy,
            shadow_check: self.shadow_check.unwrap_or_else(shadow_check_default),
        }
    }
}

/// Precision of a whole run. `Fp32` forces every layer to FP32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunPrecision {
    Fp32,
    Dfp16,
}

impl fmt::Display for RunPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunPrecision::Fp32 => "fp32",
            RunPrecision::Dfp16 => "dfp16",
        })
    }
}

impl FromStr for RunPrecision {
    type Err = DfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(RunPrecision::Fp32),
            "dfp16" | "dfp" => Ok(RunPrecision::Dfp16),
            _ => Err(DfpError::Config(format!("unknown precision `{s}`"))),
        }
    }
}

struct Builder<'a> {
    precision: RunPrecision,
    quant: QuantConfig,
    rng: &'a mut ChaCha8Rng,
    uid: u64,
}

impl Builder<'_> {
    fn resolve(&self, choice: Option<PrecisionChoice>, default: PrecisionChoice) -> LayerPrecision {
        match (self.precision, choice.unwrap_or(default)) {
            (RunPrecision::Dfp16, PrecisionChoice::Dfp) => LayerPrecision::Dfp(self.quant),
            _ => LayerPrecision::Fp32,
        }
    }

    fn build(&mut self, cfgs: &[LayerConfig], mut shape: Vec<usize>, prefix: &str) -> Result<(Sequential, Vec<usize>)> {
        let mut layers = Vec::with_capacity(cfgs.len());
        for (i, cfg) in cfgs.iter().enumerate() {
            self.uid += 1;
            let uid = self.uid;
            let kind = match cfg {
                LayerConfig::Conv { .. } => "conv",
                LayerConfig::Linear { .. } => "linear",
                LayerConfig::BatchNorm { .. } => "bn",
                LayerConfig::Relu {} => "relu",
                LayerConfig::MaxPool { .. } => "maxpool",
                LayerConfig::AvgPool { .. } => "avgpool",
                LayerConfig::Flatten {} => "flatten",
                LayerConfig::Residual { .. } => "res",
            };
            let name = format!("{prefix}{kind}{}", i + 1);
            let bad = |why: &str| DfpError::Config(format!("layer `{name}` on input {shape:?}: {why}"));
            let (layer, out) = match cfg {
                LayerConfig::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    precision,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad("expects a [C, H, W] input"));
                    };
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel || *out_channels == 0 {
                        return Err(bad("kernel larger than padded input"));
                    }
                    let p = self.resolve(*precision, PrecisionChoice::Dfp);
                    let conv = Conv::new(name.clone(), c, *out_channels, *kernel, *stride, *padding, p, uid, self.rng)?;
                    let oh = (h + 2 * padding - kernel) / stride + 1;
                    let ow = (w + 2 * padding - kernel) / stride + 1;
                    (Layer::Conv(conv), vec![*out_channels, oh, ow])
                }
                LayerConfig::Linear {
                    out_features,
                    precision,
                } => {
                    let [f] = shape[..] else {
                        return Err(bad("expects a flat input"));
                    };
                    let p = self.resolve(*precision, PrecisionChoice::Fp32);
                    let lin = Linear::new(name.clone(), f, *out_features, p, uid, self.rng)?;
                    (Layer::Linear(lin), vec![*out_features])
                }
                LayerConfig::BatchNorm { eps, momentum } => {
                    let c = shape[0];
                    (Layer::BatchNorm(BatchNorm::new(name.clone(), c, *eps, *momentum, uid)?), shape.clone())
                }
                LayerConfig::Relu {} => (Layer::Relu { name: name.clone(), mask: None }, shape.clone()),
                LayerConfig::MaxPool { size } | LayerConfig::AvgPool { size } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad("expects a [C, H, W] input"));
                    };
                    if *size == 0 || h < *size || w < *size {
                        return Err(bad("pool window larger than input"));
                    }
                    let out = vec![c, h / size, w / size];
                    let layer = if matches!(cfg, LayerConfig::MaxPool { .. }) {
                        Layer::MaxPool {
                            name: name.clone(),
                            size: *size,
                            cache: None,
                        }
                    } else {
                        Layer::AvgPool {
                            name: name.clone(),
                            size: *size,
                            cache: None,
                        }
                    };
                    (layer, out)
                }
                LayerConfig::Flatten {} => (
                    Layer::Flatten {
                        name: name.clone(),
                        cache: None,
                    },
                    vec![shape.iter().product()],
                ),
                LayerConfig::Residual { body } => {
                    let (seq, out) = self.build(body, shape.clone(), &format!("{name}."))?;
                    if out != shape {
                        return Err(bad(&format!("residual body changes the shape to {out:?}")));
                    }
                    (
                        Layer::Residual {
                            name: name.clone(),
                            body: seq,
                        },
                        out,
                    )
                }
            };
            layers.push(layer);
            shape = out;
        }
        Ok((Sequential::new(layers), shape))
    }
}

/// A network with FP32 master weights and their DFP copies.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: Sequential,
    pub config: TrainConfig,
    pub precision: RunPrecision,
    pub policy: OverflowPolicy,
    output_shape: Vec<usize>,
}

impl Model {
    /// Builds and initializes a model. Initialization draws from the
    /// `init` stream of the config seed in layer order, independent of the
    /// run precision.
    pub fn build(config: &TrainConfig, precision: RunPrecision) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "init"));
        let mut b = Builder {
            precision,
            quant: config.quant,
            rng: &mut rng,
            uid: 0,
        };
        let (net, output_shape) = b.build(&config.layers, config.input.clone(), "")?;
        Ok(Self {
            net,
            config: config.clone(),
            precision,
            policy: config.overflow_policy(),
            output_shape,
        })
    }

    /// Per-sample output shape.
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn params(&self) -> Vec<&Param> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params().into_iter().find(|p| p.name == name)
    }

    pub fn forward(&mut self, x: &FloatTensor, ctx: &mut PassContext) -> Result<FloatTensor> {
        if x.shape().len() != self.config.input.len() + 1 || x.shape()[1..] != self.config.input[..] {
            return Err(DfpError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: [&[0][..], &self.config.input].concat(),
            });
        }
        self.net.forward(Activation::Float(x.clone()), ctx)?.into_float()
    }

    /// Back-propagates the loss gradient, leaving FP32 gradients on every
    /// parameter.
    pub fn backward(&mut self, grad: FloatTensor, ctx: &mut PassContext) -> Result<()> {
        self.net.backward(grad, false, ctx).map(|_| ())
    }

    pub fn sgd_step(&mut self, lr: f32) -> Result<()> {
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        for p in self.params_mut() {
            p.sgd_step(lr, m, wd)?;
        }
        Ok(())
    }

    /// Master weights and batch-norm running statistics, in layer order.
    pub fn state(&self) -> Vec<(String, FloatTensor)> {
        fn walk(seq: &Sequential, out: &mut Vec<(String, FloatTensor)>) {
            for layer in seq.layers() {
                match layer {
                    Layer::Residual { body, .. } => walk(body, out),
                    Layer::BatchNorm(bn) => {
                        for p in [&bn.gamma, &bn.beta] {
                            out.push((p.name.clone(), p.value.clone()));
                        }
                        let c = bn.channels;
                        out.push((format!("{}.running_mean", bn.name), FloatTensor::from_raw(vec![c], bn.running_mean.clone())));
                        out.push((format!("{}.running_var", bn.name), FloatTensor::from_raw(vec![c], bn.running_var.clone())));
                    }
                    other => out.extend(other.params().into_iter().map(|p| (p.name.clone(), p.value.clone()))),
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.net, &mut out);
        out
    }

    /// Restores tensors saved by [`Model::state`].
    pub fn load_state(&mut self, state: &[(String, FloatTensor)]) -> Result<()> {
        let find = |name: &str| {
            state
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| DfpError::Config(format!("checkpoint lacks `{name}`")))
        };
        load_into(&mut self.net, &find)
    }
}

fn load_into<'a>(seq: &mut Sequential, find: &dyn Fn(&str) -> Result<&'a FloatTensor>) -> Result<()> {
    for layer in seq.layers_mut() {
        match layer {
            Layer::Residual { body, .. } => {
                load_into(body, find)?;
                continue;
            }
            Layer::BatchNorm(bn) => {
                bn.running_mean = find(&format!("{}.running_mean", bn.name))?.data().to_vec();
                bn.running_var = find(&format!("{}.running_var", bn.name))?.data().to_vec();
            }
            _ => {}
        }
        for p in layer.params_mut() {
            let t = find(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(DfpError::ShapeMismatch {
                    left: t.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            p.value = t.clone();
            p.requantize()?;
        }
    }
    Ok(())
}
