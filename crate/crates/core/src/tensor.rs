//! FP32 and dynamic fixed point (DFP) tensors and the conversions between
//! them.
//!
//! A DFP tensor is a block of small two's-complement integers that share a
//! single power-of-two exponent: element `n` has the real value
//! `i_n * 2^E_s`. The exponent is chosen from the absolute maximum of the
//! source tensor so that the largest element lands in the top magnitude bit
//! of the `P`-bit container.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{DfpError, Result};
use crate::rng;

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;
pub const MIN_EXPONENT: i32 = i8::MIN as i32;
pub const MAX_EXPONENT: i32 = i8::MAX as i32;

fn element_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Exact `2^e` as an `f64` for any exponent a DFP computation can produce.
#[inline]
pub(crate) fn pow2_f64(e: i32) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((e + 1023) as u64) << 52)
}

/// Exact `2^e` as an `f32`, including the subnormal range.
pub fn pow2_f32(e: i32) -> Result<f32> {
    if !(-149..=127).contains(&e) {
        return Err(DfpError::ScaleRange(e));
    }
    Ok(pow2_f64(e) as f32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    /// Builds a tensor, rejecting mismatched element counts and NaN/Inf.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(DfpError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(DfpError::NonFinite {
                index,
                value: data[index],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = element_count(&shape);
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Internal constructor for compute results; finiteness is checked at
    /// layer boundaries instead.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(element_count(&shape), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected = element_count(&shape);
        if expected != self.data.len() {
            return Err(DfpError::ElementCount {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose2d(&self) -> Result<Self> {
        let (rows, cols) = rank2(&self.shape)?;
        Ok(Self::from_raw(
            vec![cols, rows],
            transpose(&self.data, rows, cols),
        ))
    }
}

fn rank2(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(DfpError::Config(format!(
            "expected a rank-2 tensor, got shape {shape:?}"
        ))),
    }
}

pub(crate) fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Shared-exponent integer tensor `<I, E_s>` with `P`-bit elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DfpTensor {
    shape: Vec<usize>,
    data: Vec<i16>,
    exponent: i8,
    bits: u8,
}

impl DfpTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i16>, exponent: i32, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let expected = element_count(&shape);
        if expected != data.len() {
            return Err(DfpError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent) {
            return Err(DfpError::ExponentRange(exponent));
        }
        let limit = 1i32 << (bits - 1);
        if let Some(index) = data.iter().position(|&v| (v as i32).abs() >= limit) {
            return Err(DfpError::ElementRange {
                index,
                value: data[index] as i32,
                bits,
            });
        }
        Ok(Self {
            shape,
            data,
            exponent: exponent as i8,
            bits: bits as u8,
        })
    }

    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<i16>, exponent: i32, bits: u32) -> Self {
        debug_assert_eq!(element_count(&shape), data.len());
        debug_assert!((MIN_EXPONENT..=MAX_EXPONENT).contains(&exponent));
        Self {
            shape,
            data,
            exponent: exponent as i8,
            bits: bits as u8,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn exponent(&self) -> i32 {
        self.exponent as i32
    }

    pub fn bits(&self) -> u32 {
        self.bits as u32
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Largest element magnitude.
    pub fn max_abs(&self) -> u32 {
        self.data
            .iter()
            .map(|v| v.unsigned_abs() as u32)
            .max()
            .unwrap_or(0)
    }

    /// Real value of element `n` (exact in `f64`).
    pub fn value(&self, n: usize) -> f64 {
        self.data[n] as f64 * pow2_f64(self.exponent())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected = element_count(&shape);
        if expected != self.data.len() {
            return Err(DfpError::ElementCount {
                shape,
                expected,
                actual: self.data.len(),
            });
        }
        Ok(Self { shape, ..self })
    }

    pub fn transpose2d(&self) -> Result<Self> {
        let (rows, cols) = rank2(&self.shape)?;
        Ok(Self {
            shape: vec![cols, rows],
            data: transpose(&self.data, rows, cols),
            exponent: self.exponent,
            bits: self.bits,
        })
    }

    pub(crate) fn with_data(&self, shape: Vec<usize>, data: Vec<i16>) -> Self {
        Self::from_raw(shape, data, self.exponent(), self.bits())
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(DfpError::BitWidth(bits))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum RoundingMode {
    /// Round half away from zero.
    Nearest,
    /// `floor(x) + Bernoulli(frac(x))`, drawn from a counter-based generator.
    Stochastic { seed: u64 },
    /// Truncation toward zero.
    Biased,
}

impl fmt::Display for RoundingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RoundingMode::Nearest => f.write_str("nearest"),
            RoundingMode::Stochastic { seed } => write!(f, "stochastic:{seed}"),
            RoundingMode::Biased => f.write_str("biased"),
        }
    }
}

impl FromStr for RoundingMode {
    type Err = DfpError;

    /// Accepts `nearest`, `biased`, `stochastic` or `stochastic:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(RoundingMode::Nearest),
            "biased" => Ok(RoundingMode::Biased),
            "stochastic" => Ok(RoundingMode::Stochastic { seed: 0 }),
            _ => match s.strip_prefix("stochastic:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| RoundingMode::Stochastic { seed })
                    .map_err(|_| DfpError::Config(format!("bad stochastic seed `{seed}`"))),
                None => Err(DfpError::Config(format!("unknown rounding mode `{s}`"))),
            },
        }
    }
}

/// Parameters of one quantizer.
///
/// `pre_shift` sacrifices low mantissa bits so that long INT32 accumulation
/// chains stay in range; the effective precision is `bits - pre_shift`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub rounding: RoundingMode,
    #[serde(default)]
    pub pre_shift: u32,
}

impl QuantConfig {
    pub fn new(bits: u32, rounding: RoundingMode, pre_shift: u32) -> Result<Self> {
        let cfg = Self {
            bits,
            rounding,
            pre_shift,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dfp16() -> Self {
        Self {
            bits: 16,
            rounding: RoundingMode::Nearest,
            pre_shift: 0,
        }
    }

    /// DFP16 with one bit of accumulation headroom.
    pub fn dfp15() -> Self {
        Self {
            pre_shift: 1,
            ..Self::dfp16()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.pre_shift >= self.bits {
            return Err(DfpError::PreShift {
                pre_shift: self.pre_shift,
                bits: self.bits,
            });
        }
        Ok(())
    }

    pub fn effective_bits(&self) -> u32 {
        self.bits - self.pre_shift
    }

    /// Largest element magnitude this quantizer emits.
    pub fn max_magnitude(&self) -> i32 {
        (1i32 << (self.bits - 1 - self.pre_shift)) - 1
    }
}

/// Unbiased base-2 exponent `e` with `2^e <= |f| < 2^(e+1)`; `None` for zero.
pub fn extract_exponent(f: f32) -> Result<Option<i32>> {
    if !f.is_finite() {
        return Err(DfpError::NonFinite { index: 0, value: f });
    }
    if f == 0.0 {
        return Ok(None);
    }
    // Widening makes FP32 subnormals normal, so the stored field is exact.
    let biased = ((f as f64).to_bits() >> 52) & 0x7ff;
    Ok(Some(biased as i32 - 1023))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedExponent {
    pub exponent: i32,
    pub all_zero: bool,
}

/// `E_s = E(max|f|) - (P - 2)`; an all-zero tensor gets `E_s = 0`.
pub fn shared_exponent(t: &FloatTensor, bits: u32) -> Result<SharedExponent> {
    check_bits(bits)?;
    if t.is_empty() {
        return Err(DfpError::EmptyTensor);
    }
    if let Some(index) = t.first_non_finite() {
        return Err(DfpError::NonFinite {
            index,
            value: t.data[index],
        });
    }
    Ok(match extract_exponent(t.max_abs())? {
        Some(e_max) => SharedExponent {
            exponent: e_max - (bits as i32 - 2),
            all_zero: false,
        },
        None => SharedExponent {
            exponent: 0,
            all_zero: true,
        },
    })
}

/// Rounds `x` to an integer. Stochastic draws are keyed by
/// `(seed, tensor_id, index)`.
#[inline]
pub fn round_value(x: f64, mode: RoundingMode, tensor_id: u64, index: u64) -> i64 {
    match mode {
        RoundingMode::Nearest => x.round() as i64,
        RoundingMode::Biased => x.trunc() as i64,
        RoundingMode::Stochastic { seed } => {
            let lo = x.floor();
            let frac = x - lo;
            let up = frac > 0.0 && rng::counter_uniform(seed, tensor_id, index) < frac;
            lo as i64 + up as i64
        }
    }
}

/// Quantizes with stochastic stream id 0.
pub fn quantize(t: &FloatTensor, cfg: &QuantConfig) -> Result<DfpTensor> {
    quantize_with_id(t, cfg, 0)
}

/// Quantizes `t`; `tensor_id` selects the stochastic-rounding stream.
///
/// Exponents below the 8-bit range are clamped to -128, which flushes the
/// smallest magnitudes toward zero instead of failing.
pub fn quantize_with_id(t: &FloatTensor, cfg: &QuantConfig, tensor_id: u64) -> Result<DfpTensor> {
    cfg.validate()?;
    let shared = shared_exponent(t, cfg.bits)?;
    if shared.all_zero {
        return Ok(DfpTensor::from_raw(
            t.shape.clone(),
            vec![0; t.len()],
            0,
            cfg.bits,
        ));
    }
    let exponent = (shared.exponent + cfg.pre_shift as i32).max(MIN_EXPONENT);
    if exponent > MAX_EXPONENT {
        return Err(DfpError::ExponentRange(exponent));
    }
    let inv_scale = pow2_f64(-exponent);
    let limit = cfg.max_magnitude() as i64;
    let data = t
        .data
        .iter()
        .enumerate()
        .map(|(n, &f)| {
            let q = round_value(f as f64 * inv_scale, cfg.rounding, tensor_id, n as u64);
            q.clamp(-limit, limit) as i16
        })
        .collect();
    Ok(DfpTensor::from_raw(t.shape.clone(), data, exponent, cfg.bits))
}

/// `f_n = i_n * 2^E_s`, exactly.
pub fn dequantize(t: &DfpTensor) -> Result<FloatTensor> {
    let scale = pow2_f64(t.exponent());
    let data = t
        .data
        .iter()
        .enumerate()
        .map(|(index, &i)| {
            let v = i as f64 * scale;
            if v.abs() > f32::MAX as f64 {
                Err(DfpError::Fp32Overflow { index })
            } else {
                Ok(v as f32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FloatTensor::from_raw(t.shape.clone(), data))
}
