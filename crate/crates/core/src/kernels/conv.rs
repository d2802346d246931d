use rayon::prelude::*;

use crate::arith::{ChainPolicy, OverflowPolicy};
use crate::error::{DfpError, Result};
use crate::kernels::pack::{pack_weights, BlockedInput, PackedWeights};
use crate::kernels::vnni::{vnni_madd, vnni_madd_shadow, LaneShadow, Lanes, SIMD_WIDTH};
use crate::kernels::{BlockingParams, ConvSpec, KernelStats, GROUP_CHANNELS};
use crate::tensor::{pow2_f32, transpose, DfpTensor, FloatTensor};

#[derive(Debug, Clone)]
pub struct KernelOutput {
    pub output: FloatTensor,
    pub stats: KernelStats,
}

/// Every INT32 partial chain the kernel spilled, before FP32 conversion.
#[derive(Debug, Clone)]
pub struct ChainPartials {
    batch: usize,
    out_channels: usize,
    out_h: usize,
    out_w: usize,
    chunks: usize,
    data: Vec<i32>,
}

impl ChainPartials {
    pub fn chunks(&self) -> usize {
        self.chunks
    }

    /// Partial sum of chain `chunk` for output `(n, k, oh, ow)`.
    pub fn get(&self, n: usize, k: usize, oh: usize, ow: usize, chunk: usize) -> i32 {
        let kb = self.out_channels.div_ceil(SIMD_WIDTH);
        let task = n * kb + k / SIMD_WIDTH;
        let idx = (((task * self.out_h + oh) * self.out_w + ow) * self.chunks + chunk) * SIMD_WIDTH
            + k % SIMD_WIDTH;
        self.data[idx]
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.batch, self.out_channels, self.out_h, self.out_w, self.chunks]
    }
}

/// Chain `j` covers 8-channel groups `[j*g, min((j+1)*g, groups))`.
fn chunk_ranges(spec: &ConvSpec, blk: &BlockingParams) -> Vec<(usize, usize)> {
    let groups = spec.padded_in_channels() / GROUP_CHANNELS;
    let g = blk.icblk / GROUP_CHANNELS;
    (0..groups).step_by(g).map(|s| (s, (s + g).min(groups))).collect()
}

fn check_policy(
    spec: &ConvSpec,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
    max_a: u32,
    max_b: u32,
) -> Result<()> {
    if let ChainPolicy::Strict { max_chain } = policy.chain {
        let chain = blk.chain_length(spec);
        let worst = max_a as u64 * max_b as u64;
        let safe = if worst == 0 { u64::MAX } else { i32::MAX as u64 / worst };
        if chain > max_chain || chain as u64 > safe {
            return Err(DfpError::StrictPolicy {
                chain,
                max_chain,
                safe,
            });
        }
    }
    Ok(())
}

struct Job<'a> {
    input: &'a BlockedInput,
    weights: &'a PackedWeights,
    spec: &'a ConvSpec,
    rb: usize,
    chunks: &'a [(usize, usize)],
    scale: f32,
    shadow: bool,
    trace: bool,
}

impl Job<'_> {
    /// Computes output channels `kblk*16..+16` of image `n` into `out`,
    /// laid out `[OH][OW][16]`.
    fn run(&self, n: usize, kblk: usize, out: &mut [f32], partials: &mut Vec<i32>) -> KernelStats {
        let spec = self.spec;
        let (oh_n, ow_n) = (spec.out_h(), spec.out_w());
        let (kh_n, kw_n, st) = (spec.kernel_h, spec.kernel_w, spec.stride);
        let mut stats = KernelStats::default();
        let mut acc: Vec<Lanes> = vec![[0; SIMD_WIDTH]; self.rb];
        let mut shadows = vec![LaneShadow::default(); self.rb];
        if self.trace {
            partials.resize(oh_n * ow_n * self.chunks.len() * SIMD_WIDTH, 0);
        }
        for oh in 0..oh_n {
            for owb in (0..ow_n).step_by(self.rb) {
                let nrb = self.rb.min(ow_n - owb);
                for (ci, &(g0, g1)) in self.chunks.iter().enumerate() {
                    acc[..nrb].iter_mut().for_each(|a| *a = [0; SIMD_WIDTH]);
                    shadows[..nrb].iter_mut().for_each(LaneShadow::reset);
                    for cblk in g0 / 2..g1.div_ceil(2) {
                        let ibs = (cblk * 2).max(g0) - cblk * 2..(cblk * 2 + 2).min(g1) - cblk * 2;
                        for kh in 0..kh_n {
                            for kw in 0..kw_n {
                                for ib in ibs.clone() {
                                    let w = self.weights.regs(cblk, kblk, kh, kw, ib);
                                    for r in 0..nrb {
                                        let mem = self.input.mem(n, cblk, st * oh + kh, st * (owb + r) + kw, ib);
                                        if self.shadow {
                                            vnni_madd_shadow(mem, w, &mut acc[r], &mut shadows[r]);
                                        } else {
                                            vnni_madd(mem, w, &mut acc[r]);
                                        }
                                    }
                                    stats.fma_count += nrb as u64;
                                }
                            }
                        }
                    }
                    for r in 0..nrb {
                        let ow = owb + r;
                        let dst = &mut out[(oh * ow_n + ow) * SIMD_WIDTH..][..SIMD_WIDTH];
                        for (d, &a) in dst.iter_mut().zip(acc[r].iter()) {
                            *d += a as f32 * self.scale;
                        }
                        if self.trace {
                            let base = ((oh * ow_n + ow) * self.chunks.len() + ci) * SIMD_WIDTH;
                            partials[base..base + SIMD_WIDTH].copy_from_slice(&acc[r]);
                        }
                        stats.overflow_count += shadows[r].overflowed_lanes() as u64;
                    }
                    stats.convert_count += nrb as u64;
                    stats.spill_count += 1;
                }
            }
        }
        stats
    }
}

fn run_conv(
    input: &DfpTensor,
    weights: &PackedWeights,
    spec: &ConvSpec,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
    trace: bool,
) -> Result<(KernelOutput, Option<ChainPartials>)> {
    spec.validate()?;
    blk.validate(spec)?;
    if weights.in_channels() != spec.in_channels
        || weights.out_channels() != spec.out_channels
        || weights.kernel() != (spec.kernel_h, spec.kernel_w)
    {
        return Err(DfpError::Blocking(format!(
            "packed weights ({}x{}x{:?}) do not match {spec:?}",
            weights.out_channels(),
            weights.in_channels(),
            weights.kernel()
        )));
    }
    let n = match *input.shape() {
        [n, c, h, w] if c == spec.in_channels && h == spec.height && w == spec.width => n,
        _ => {
            return Err(DfpError::ShapeMismatch {
                left: input.shape().to_vec(),
                right: vec![0, spec.in_channels, spec.height, spec.width],
            })
        }
    };
    let max_w = weights.as_flat().map(|v| v.unsigned_abs() as u32).max().unwrap_or(0);
    check_policy(spec, blk, policy, input.max_abs(), max_w)?;
    let scale = pow2_f32(input.exponent() + weights.exponent())?;

    let blocked = BlockedInput::new(input, spec.padding)?;
    let chunks = chunk_ranges(spec, blk);
    let job = Job {
        input: &blocked,
        weights,
        spec,
        rb: blk.rb_size,
        chunks: &chunks,
        scale,
        shadow: policy.shadow_check,
        trace,
    };
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let kb = spec.padded_out_channels() / SIMD_WIDTH;
    let tile = oh * ow * SIMD_WIDTH;
    let mut blocked_out = vec![0f32; n * kb * tile];
    let per_task: Vec<(KernelStats, Vec<i32>)> = blocked_out
        .par_chunks_mut(tile)
        .enumerate()
        .map(|(t, out)| {
            let mut partials = Vec::new();
            let stats = job.run(t / kb, t % kb, out, &mut partials);
            (stats, partials)
        })
        .collect();

    let mut stats = KernelStats::default();
    let mut trace_data = Vec::new();
    for (s, p) in per_task {
        stats += s;
        trace_data.extend_from_slice(&p);
    }

    let k_n = spec.out_channels;
    let mut data = vec![0f32; n * k_n * oh * ow];
    for ni in 0..n {
        for k in 0..k_n {
            let src = &blocked_out[(ni * kb + k / SIMD_WIDTH) * tile..][..tile];
            let dst = &mut data[(ni * k_n + k) * oh * ow..][..oh * ow];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = src[p * SIMD_WIDTH + k % SIMD_WIDTH];
            }
        }
    }
    let output = FloatTensor::from_raw(vec![n, k_n, oh, ow], data);
    let partials = trace.then(|| ChainPartials {
        batch: n,
        out_channels: k_n,
        out_h: oh,
        out_w: ow,
        chunks: chunks.len(),
        data: trace_data,
    });
    Ok((KernelOutput { output, stats }, partials))
}

/// Forward convolution of an NCHW DFP input with packed DFP weights.
///
/// Each output lane accumulates chains of `icblk * KH * KW` products in
/// INT32, and each finished chain is converted and added into the FP32
/// output with scale `2^(E_in + E_w)`.
pub fn conv_fprop(
    input: &DfpTensor,
    weights: &PackedWeights,
    spec: &ConvSpec,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
) -> Result<KernelOutput> {
    run_conv(input, weights, spec, blk, policy, false).map(|(o, _)| o)
}

/// [`conv_fprop`] that also returns every spilled INT32 partial sum.
pub fn conv_fprop_traced(
    input: &DfpTensor,
    weights: &PackedWeights,
    spec: &ConvSpec,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
) -> Result<(KernelOutput, ChainPartials)> {
    run_conv(input, weights, spec, blk, policy, true).map(|(o, p)| (o, p.expect("traced")))
}

fn gemm_operands(a: &DfpTensor, b: &DfpTensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k1], [k2, n]) if k1 == k2 => Ok((*m, *n, *k1)),
        _ => Err(DfpError::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }),
    }
}

fn run_gemm(
    a: &DfpTensor,
    b: &DfpTensor,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
    trace: bool,
) -> Result<(KernelOutput, Option<ChainPartials>)> {
    let (m, n, k) = gemm_operands(a, b)?;
    let spec = ConvSpec::gemm(m, n, k)?;
    // A^T is a 1 x K x 1 x M image, B^T a bank of N 1x1 filters.
    let input = a.with_data(vec![1, k, 1, m], transpose(a.data(), m, k));
    let filters = b.with_data(vec![n, k, 1, 1], transpose(b.data(), k, n));
    let packed = pack_weights(&filters, &spec)?;
    let (out, partials) = run_conv(&input, &packed, &spec, blk, policy, trace)?;
    let c = FloatTensor::from_raw(vec![m, n], transpose(out.output.data(), n, m));
    Ok((
        KernelOutput {
            output: c,
            stats: out.stats,
        },
        partials,
    ))
}

/// `A (M x K) * B (K x N)` through the convolution kernel as a 1x1
/// convolution, so chains run along the reduction dimension in blocks of
/// `icblk`.
pub fn gemm_dfp(
    a: &DfpTensor,
    b: &DfpTensor,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
) -> Result<KernelOutput> {
    run_gemm(a, b, blk, policy, false).map(|(o, _)| o)
}

/// [`gemm_dfp`] plus partial sums; `get(0, n, 0, m, chunk)` addresses
/// element `(m, n)`.
pub fn gemm_dfp_traced(
    a: &DfpTensor,
    b: &DfpTensor,
    blk: &BlockingParams,
    policy: &OverflowPolicy,
) -> Result<(KernelOutput, ChainPartials)> {
    run_gemm(a, b, blk, policy, true).map(|(o, p)| (o, p.expect("traced")))
}
