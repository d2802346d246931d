//! Blocked INT16 convolution and GEMM kernels with INT32 partial chains
//! spilled into FP32.

mod conv;
pub mod pack;
pub mod vnni;

use std::ops::AddAssign;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::arith::{ChainPolicy, OverflowPolicy};
use crate::error::{DfpError, Result};
use pack::round_up16;
use vnni::{PRODUCTS_PER_LANE, SIMD_WIDTH};

pub use conv::{
    conv_fprop, conv_fprop_traced, gemm_dfp, gemm_dfp_traced, ChainPartials, KernelOutput,
};
pub use pack::{pack_weights, PackedWeights};

/// Chain lengths above this are past the sweet spot for overhead vs reuse.
pub const CHAIN_CEILING: usize = 256;
/// Channel granularity of one instruction's memory operand.
pub const GROUP_CHANNELS: usize = PRODUCTS_PER_LANE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let s = Self {
            in_channels,
            out_channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
        };
        s.validate()?;
        Ok(s)
    }

    /// The 1x1 convolution that computes an `m x k` by `k x n` product.
    pub fn gemm(m: usize, n: usize, k: usize) -> Result<Self> {
        Self::new(k, n, 1, m, 1, 1, 1, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.out_channels,
            self.height,
            self.width,
            self.kernel_h,
            self.kernel_w,
            self.stride,
        ];
        if dims.contains(&0) {
            return Err(DfpError::Blocking(format!("zero-sized dimension in {self:?}")));
        }
        if self.height + 2 * self.padding < self.kernel_h || self.width + 2 * self.padding < self.kernel_w {
            return Err(DfpError::Blocking(format!("kernel larger than padded input in {self:?}")));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn padded_in_channels(&self) -> usize {
        round_up16(self.in_channels)
    }

    pub fn padded_out_channels(&self) -> usize {
        round_up16(self.out_channels)
    }
}

/// Loop blocking of the forward kernel.
///
/// `icblk` input channels (a multiple of 8) form one INT32 accumulation
/// chain of `icblk * KH * KW` products per output lane; `rb_size` output
/// pixels share each weight load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingParams {
    pub icblk: usize,
    pub rb_size: usize,
}

impl BlockingParams {
    pub const SIMD_WIDTH: usize = SIMD_WIDTH;
    pub const VNNI_K: usize = vnni::VNNI_K;

    pub fn new(icblk: usize, rb_size: usize) -> Self {
        Self { icblk, rb_size }
    }

    /// Default blocking for a policy.
    ///
    /// Empirical policies get a chain in `[target, max(target, 256)]` when a
    /// multiple of 16 dividing the padded channel count allows it, otherwise
    /// the shortest chain at or above the target, otherwise all channels.
    /// Strict policies get the longest multiple of 8 whose chain stays within
    /// `max_chain`.
    pub fn default_for(spec: &ConvSpec, policy: &OverflowPolicy) -> Self {
        let taps = spec.kernel_h * spec.kernel_w;
        let cp = spec.padded_in_channels();
        let rb_size = 4.min(spec.out_w()).max(1);
        let chain = |ic: usize| ic * taps;
        let dividing = |step: usize| (1..=cp / step).map(move |g| g * step).filter(move |ic| cp % ic == 0);
        let icblk = match policy.chain {
            ChainPolicy::Strict { max_chain } => dividing(GROUP_CHANNELS)
                .filter(|&ic| chain(ic) <= max_chain)
                .max()
                .unwrap_or(GROUP_CHANNELS),
            ChainPolicy::Empirical { chain_block } => {
                let ceiling = chain_block.max(CHAIN_CEILING);
                dividing(16)
                    .filter(|&ic| chain(ic) >= chain_block && chain(ic) <= ceiling)
                    .max()
                    .or_else(|| dividing(16).find(|&ic| chain(ic) >= chain_block))
                    .unwrap_or(cp)
            }
        };
        Self { icblk, rb_size }
    }

    pub fn validate(&self, spec: &ConvSpec) -> Result<()> {
        if self.icblk == 0 || self.icblk % GROUP_CHANNELS != 0 {
            return Err(DfpError::Blocking(format!(
                "icblk {} must be a positive multiple of {GROUP_CHANNELS}",
                self.icblk
            )));
        }
        if self.icblk > spec.padded_in_channels() {
            return Err(DfpError::Blocking(format!(
                "icblk {} exceeds the {} padded input channels",
                self.icblk,
                spec.padded_in_channels()
            )));
        }
        if self.rb_size == 0 {
            return Err(DfpError::Blocking("rb_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Longest INT32 chain (products per output lane) this blocking builds.
    pub fn chain_length(&self, spec: &ConvSpec) -> usize {
        self.icblk.min(spec.padded_in_channels()) * spec.kernel_h * spec.kernel_w
    }
}

/// Instruction counters for one kernel invocation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelStats {
    /// Emulated pair-FMA instructions.
    pub fma_count: u64,
    /// INT32 to FP32 register conversions.
    pub convert_count: u64,
    /// Spill events (one per register block per chain).
    pub spill_count: u64,
    /// Output lanes whose chain left the INT32 range (shadow check only).
    pub overflow_count: u64,
}

impl KernelStats {
    /// Measured converts per FMA instruction.
    pub fn convert_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.convert_count, self.fma_count.max(1))
    }
}

impl AddAssign for KernelStats {
    fn add_assign(&mut self, o: Self) {
        self.fma_count += o.fma_count;
        self.convert_count += o.convert_count;
        self.spill_count += o.spill_count;
        self.overflow_count += o.overflow_count;
    }
}

/// Conversion instructions per FMA instruction for one register block:
/// `RB / ((ICBLK/16) * KH * KW * 2 * RB)`.
pub fn overhead_ratio(spec: &ConvSpec, blk: &BlockingParams) -> Ratio<u64> {
    let taps = (spec.kernel_h * spec.kernel_w) as u64;
    let rb = blk.rb_size as u64;
    // (ICBLK/16) * 2 written as ICBLK/8 to stay integral for ICBLK = 8.
    Ratio::new(rb, (blk.icblk / GROUP_CHANNELS) as u64 * taps * rb)
}

/// Exact counter values the kernel must report for a batch of `batch`
/// images, including ragged channel and width remainders.
pub fn expected_stats(spec: &ConvSpec, blk: &BlockingParams, batch: usize) -> KernelStats {
    let taps = (spec.kernel_h * spec.kernel_w) as u64;
    let (oh, ow) = (spec.out_h() as u64, spec.out_w() as u64);
    let kb = (spec.padded_out_channels() / SIMD_WIDTH) as u64;
    let groups = (spec.padded_in_channels() / GROUP_CHANNELS) as u64;
    let chunks = groups.div_ceil((blk.icblk / GROUP_CHANNELS) as u64);
    let rblocks = ow.div_ceil(blk.rb_size as u64);
    let tiles = batch as u64 * kb * oh;
    KernelStats {
        fma_count: tiles * ow * groups * taps,
        convert_count: tiles * ow * chunks,
        spill_count: tiles * rblocks * chunks,
        overflow_count: 0,
    }
}
