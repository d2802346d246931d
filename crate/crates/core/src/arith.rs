//! Integer arithmetic on DFP tensors: multiply, add, down-conversion to a
//! narrower DFP tensor, and the INT32 accumulator bookkeeping shared with
//! the kernels.

use serde::{Deserialize, Serialize};

use crate::error::{DfpError, Result};
use crate::tensor::{pow2_f32, DfpTensor, FloatTensor, MAX_BITS, MAX_EXPONENT, MIN_BITS, MIN_EXPONENT};

/// Accumulator width in bits.
pub const ACCUM_BITS: u32 = 32;

/// Environment variable that forces 64-bit overflow shadowing on.
pub const SHADOW_ENV: &str = "DFP_SHADOW_CHECK";

/// INT32 tensor with a shared exponent, as produced by products and sums of
/// DFP tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    exponent: i32,
    overflow_count: u64,
}

impl AccumTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, exponent: i32) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DfpError::ElementCount {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            exponent,
            overflow_count: 0,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn accum_bits(&self) -> u32 {
        ACCUM_BITS
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow_count
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Real value of element `n` (exact in `f64`).
    pub fn value(&self, n: usize) -> f64 {
        self.data[n] as f64 * 2f64.powi(self.exponent)
    }
}

/// How long INT32 accumulation chains may grow before spilling to FP32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChainPolicy {
    /// Chains are provably overflow-free: at most `max_chain` products.
    Strict { max_chain: usize },
    /// Chains target `chain_block` products; overflow is possible and only
    /// observed through the shadow check.
    Empirical { chain_block: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverflowPolicy {
    pub chain: ChainPolicy,
    pub shadow_check: bool,
}

impl OverflowPolicy {
    /// Strict policy for operands with `bits`-bit elements and `pre_shift`
    /// bits of headroom.
    pub fn strict(max_chain: usize, bits: u32, pre_shift: u32) -> Result<Self> {
        let safe = safe_chain_length(bits, pre_shift)?;
        if max_chain == 0 || max_chain as u64 > safe {
            return Err(DfpError::StrictPolicy {
                chain: max_chain,
                max_chain: safe.min(usize::MAX as u64) as usize,
                safe,
            });
        }
        Ok(Self {
            chain: ChainPolicy::Strict { max_chain },
            shadow_check: shadow_check_default(),
        })
    }

    pub fn empirical(chain_block: usize) -> Result<Self> {
        if chain_block == 0 {
            return Err(DfpError::Config("empirical chain block must be >= 1".into()));
        }
        Ok(Self {
            chain: ChainPolicy::Empirical { chain_block },
            shadow_check: shadow_check_default(),
        })
    }

    pub fn with_shadow_check(mut self, on: bool) -> Self {
        self.shadow_check = on;
        self
    }

    /// Chain length the default blocking should aim for.
    pub fn chain_target(&self) -> usize {
        match self.chain {
            ChainPolicy::Strict { max_chain } => max_chain,
            ChainPolicy::Empirical { chain_block } => chain_block,
        }
    }
}

impl Default for ChainPolicy {
    fn default() -> Self {
        ChainPolicy::Empirical { chain_block: 200 }
    }
}

impl Default for OverflowPolicy {
    fn default() -> Self {
        Self {
            chain: ChainPolicy::Empirical { chain_block: 200 },
            shadow_check: shadow_check_default(),
        }
    }
}

/// Shadowing is on in debug builds or when `DFP_SHADOW_CHECK=1`.
pub fn shadow_check_default() -> bool {
    cfg!(debug_assertions) || std::env::var(SHADOW_ENV).map(|v| v == "1").unwrap_or(false)
}

fn same_or_broadcast<'a>(a: &'a DfpTensor, b: &'a DfpTensor) -> Result<&'a [usize]> {
    if a.shape() == b.shape() {
        Ok(a.shape())
    } else if b.len() == 1 {
        Ok(a.shape())
    } else if a.len() == 1 {
        Ok(b.shape())
    } else {
        Err(DfpError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })
    }
}

fn pairs<'a>(a: &'a DfpTensor, b: &'a DfpTensor) -> impl Iterator<Item = (i32, i32)> + 'a {
    let n = a.len().max(b.len());
    let (sa, sb) = (a.len() != 1, b.len() != 1);
    (0..n).map(move |k| {
        (
            a.data()[if sa { k } else { 0 }] as i32,
            b.data()[if sb { k } else { 0 }] as i32,
        )
    })
}

/// Elementwise product; a single-element operand broadcasts.
pub fn dfp_multiply(a: &DfpTensor, b: &DfpTensor) -> Result<AccumTensor> {
    let shape = same_or_broadcast(a, b)?.to_vec();
    // |i| < 2^15 on both sides, so every product fits in 31 bits.
    let data = pairs(a, b).map(|(x, y)| x * y).collect();
    AccumTensor::new(shape, data, a.exponent() + b.exponent())
}

/// Aligns the operand with the smaller exponent by an arithmetic right shift
/// and adds. Shifts of 32 or more make that operand contribute zero.
pub fn dfp_add(a: &DfpTensor, b: &DfpTensor) -> Result<AccumTensor> {
    let shape = same_or_broadcast(a, b)?.to_vec();
    let (ea, eb) = (a.exponent(), b.exponent());
    let exponent = ea.max(eb);
    let (sa, sb) = ((exponent - ea) as u32, (exponent - eb) as u32);
    let align = |v: i32, s: u32| if s >= 32 { 0 } else { v >> s };
    let data = pairs(a, b).map(|(x, y)| align(x, sa) + align(y, sb)).collect();
    AccumTensor::new(shape, data, exponent)
}

/// Leading zero count of a 32-bit word; `lzc(0) == 32`.
#[inline]
pub fn lzc(x: u32) -> u32 {
    x.leading_zeros()
}

/// Right-shift that brings the largest magnitude into `bits - 1` magnitude
/// bits, never negative.
pub fn down_convert_shift(max_abs: u32, bits: u32) -> u32 {
    (ACCUM_BITS - lzc(max_abs)).saturating_sub(bits - 1)
}

/// Narrows an INT32 accumulator to a `bits`-bit DFP tensor.
pub fn down_convert(acc: &AccumTensor, bits: u32) -> Result<DfpTensor> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(DfpError::BitWidth(bits));
    }
    if acc.is_empty() {
        return Err(DfpError::EmptyTensor);
    }
    let max_abs = acc.data.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0);
    if max_abs == 0 {
        if !(MIN_EXPONENT..=MAX_EXPONENT).contains(&acc.exponent) {
            return Err(DfpError::ExponentRange(acc.exponent));
        }
        return Ok(DfpTensor::from_raw(
            acc.shape.clone(),
            vec![0; acc.len()],
            acc.exponent,
            bits,
        ));
    }
    let mut shift = down_convert_shift(max_abs, bits);
    // Exponents under the 8-bit floor cost extra shift instead of failing.
    if acc.exponent + (shift as i32) < MIN_EXPONENT {
        shift = (MIN_EXPONENT - acc.exponent) as u32;
    }
    let exponent = acc.exponent + shift as i32;
    if exponent > MAX_EXPONENT {
        return Err(DfpError::ExponentRange(exponent));
    }
    let limit = (1i32 << (bits - 1)) - 1;
    let data = acc
        .data
        .iter()
        .map(|&v| {
            let s = if shift >= 32 { v >> 31 } else { v >> shift };
            // Only a negative value just under -2^(bits-1) can floor past the
            // range; clamping keeps the error below one step.
            s.max(-limit) as i16
        })
        .collect();
    Ok(DfpTensor::from_raw(acc.shape.clone(), data, exponent, bits))
}

/// Number of worst-case products `(2^(P-1-s) - 1)^2` that a signed 32-bit
/// accumulator can absorb without overflow.
pub fn safe_chain_length(bits: u32, pre_shift: u32) -> Result<u64> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(DfpError::BitWidth(bits));
    }
    if pre_shift >= bits {
        return Err(DfpError::PreShift { pre_shift, bits });
    }
    let max_mag = (1u64 << (bits - 1 - pre_shift)) - 1;
    if max_mag == 0 {
        return Ok(u64::MAX);
    }
    Ok(i32::MAX as u64 / (max_mag * max_mag))
}

/// `dst += acc * 2^E` elementwise, then clears `acc` for the next chain.
pub fn spill_to_fp32(acc: &mut AccumTensor, dst: &mut FloatTensor) -> Result<()> {
    if acc.shape != dst.shape() {
        return Err(DfpError::ShapeMismatch {
            left: acc.shape.clone(),
            right: dst.shape().to_vec(),
        });
    }
    let scale = pow2_f32(acc.exponent)?;
    for (d, a) in dst.data_mut().iter_mut().zip(acc.data.iter_mut()) {
        *d += *a as f32 * scale;
        *a = 0;
    }
    Ok(())
}
