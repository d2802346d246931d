//! Kernel benchmarks: instruction counters, overhead ratios, overflow
//! counts and error against exact oracles.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::arith::{safe_chain_length, OverflowPolicy};
use crate::error::{DfpError, Result};
use crate::kernels::{
    conv_fprop_traced, gemm_dfp_traced, overhead_ratio, pack_weights, BlockingParams, ChainPartials, ConvSpec,
    KernelOutput,
};
use crate::rng::derive_seed;
use crate::tensor::{quantize_with_id, DfpTensor, FloatTensor, QuantConfig, RoundingMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Strict,
    Empirical,
}

impl FromStr for PolicyKind {
    type Err = DfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "strict" => Ok(PolicyKind::Strict),
            "empirical" => Ok(PolicyKind::Empirical),
            _ => Err(DfpError::Config(format!("unknown policy `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchData {
    /// Unit Gaussian.
    Gaussian,
    /// Uniform in `[-1, 1]`.
    Uniform,
    /// Every element at the largest representable magnitude, same sign.
    Adversarial,
}

impl FromStr for BenchData {
    type Err = DfpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(BenchData::Gaussian),
            "uniform" => Ok(BenchData::Uniform),
            "adversarial" => Ok(BenchData::Adversarial),
            _ => Err(DfpError::Config(format!("unknown data kind `{s}`"))),
        }
    }
}

impl fmt::Display for BenchData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BenchData::Gaussian => "gaussian",
            BenchData::Uniform => "uniform",
            BenchData::Adversarial => "adversarial",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub icblk: Option<usize>,
    pub rb: Option<usize>,
    pub policy: PolicyKind,
    /// Strict: `max_chain` (default `safe_chain_length`). Empirical: chain
    /// target (default 200).
    pub chain: Option<usize>,
    pub bits: u32,
    pub pre_shift: u32,
    pub trials: usize,
    pub data: BenchData,
    pub seed: u64,
    pub shadow_check: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            icblk: None,
            rb: None,
            policy: PolicyKind::Empirical,
            chain: None,
            bits: 16,
            pre_shift: 1,
            trials: 1,
            data: BenchData::Gaussian,
            seed: 0,
            shadow_check: true,
        }
    }
}

impl BenchOptions {
    pub fn overflow_policy(&self) -> Result<OverflowPolicy> {
        let p = match self.policy {
            PolicyKind::Strict => {
                let safe = safe_chain_length(self.bits, self.pre_shift)?;
                let max_chain = self.chain.unwrap_or(safe.min(usize::MAX as u64) as usize);
                OverflowPolicy::strict(max_chain, self.bits, self.pre_shift)?
            }
            PolicyKind::Empirical => OverflowPolicy::empirical(self.chain.unwrap_or(200))?,
        };
        Ok(p.with_shadow_check(self.shadow_check))
    }

    pub fn blocking(&self, spec: &ConvSpec, policy: &OverflowPolicy) -> BlockingParams {
        let mut b = BlockingParams::default_for(spec, policy);
        if let Some(ic) = self.icblk {
            b.icblk = ic;
        }
        if let Some(rb) = self.rb {
            b.rb_size = rb;
        }
        b
    }

    fn quant(&self) -> Result<QuantConfig> {
        QuantConfig::new(self.bits, RoundingMode::Nearest, self.pre_shift)
    }
}

/// One benchmark trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub trial: usize,
    pub kind: &'static str,
    pub shape: String,
    pub data: String,
    pub icblk: usize,
    pub rb: usize,
    pub chain: usize,
    pub fma_count: u64,
    pub convert_count: u64,
    pub spill_count: u64,
    pub overflow_count: u64,
    pub analytic_ratio: f64,
    pub measured_ratio: f64,
    /// Exact rational equality of the two ratios.
    pub ratio_match: bool,
    /// Spilled INT32 partials sum to the 64-bit integer oracle.
    pub int_exact: bool,
    /// Relative Frobenius error against an FP64 evaluation of the FP32
    /// operands.
    pub rel_error: f64,
    /// Worst-case relative Frobenius error implied by the operand
    /// exponents and FP32 spill rounding.
    pub rel_error_bound: f64,
}

fn sample(rng: &mut ChaCha8Rng, n: usize, data: BenchData, q: &QuantConfig) -> FloatTensor {
    // Quantizes to exactly the largest integer magnitude.
    let extreme = q.max_magnitude() as f32 * 2f32.powi(2 - q.effective_bits() as i32);
    let v = (0..n)
        .map(|_| match data {
            BenchData::Gaussian => rng.sample(StandardNormal),
            BenchData::Uniform => rng.random_range(-1.0f32..=1.0),
            BenchData::Adversarial => extreme,
        })
        .collect();
    FloatTensor::new(vec![n], v).expect("finite samples")
}

/// A real-valued product in terms of `terms(i)`, the list of
/// `(a_float, b_float, a_quantized_int, b_quantized_int)` contributing to
/// output `i`.
struct OracleInput<'a> {
    a: &'a FloatTensor,
    b: &'a FloatTensor,
    aq: &'a DfpTensor,
    bq: &'a DfpTensor,
}

struct Accum {
    err2: f64,
    norm2: f64,
    bound2: f64,
    exact: bool,
}

impl Accum {
    fn new() -> Self {
        Self {
            err2: 0.0,
            norm2: 0.0,
            bound2: 0.0,
            exact: true,
        }
    }

    /// Adds one output given its `(a index, b index)` pairs.
    fn push(&mut self, o: &OracleInput, pairs: impl Iterator<Item = (usize, usize)>, got: f32, partial_sum: i64, chunks: usize) {
        let (ha, hb) = (2f64.powi(o.aq.exponent()), 2f64.powi(o.bq.exponent()));
        let scale = ha * hb;
        let (mut exact, mut int, mut sum_b, mut sum_aq, mut sum_abs) = (0f64, 0i64, 0f64, 0f64, 0f64);
        for (ia, ib) in pairs {
            let (ai, bi) = (o.aq.data()[ia] as i64, o.bq.data()[ib] as i64);
            exact += o.a.data()[ia] as f64 * o.b.data()[ib] as f64;
            int += ai * bi;
            sum_b += (o.b.data()[ib] as f64).abs();
            sum_aq += (ai as f64 * ha).abs();
            sum_abs += (ai * bi).abs() as f64 * scale;
        }
        self.exact &= int == partial_sum;
        // |AB - AqBq| <= hA * sum|B| + hB * sum|Aq|, with every element
        // within one step of its source, plus the FP32 roundings of each
        // chunk conversion and addition.
        let bound = ha * sum_b + hb * sum_aq + (chunks as f64 + 1.0) * f32::EPSILON as f64 * 0.5 * sum_abs;
        self.err2 += (got as f64 - exact).powi(2);
        self.norm2 += exact * exact;
        self.bound2 += bound * bound;
    }

    fn rel(&self) -> (f64, f64) {
        let n = self.norm2.sqrt().max(f64::MIN_POSITIVE);
        (self.err2.sqrt() / n, self.bound2.sqrt() / n)
    }
}

fn row(
    trial: usize,
    kind: &'static str,
    shape: String,
    opts: &BenchOptions,
    spec: &ConvSpec,
    blk: &BlockingParams,
    out: &KernelOutput,
    acc: &Accum,
) -> BenchRow {
    let analytic = overhead_ratio(spec, blk);
    let measured = out.stats.convert_ratio();
    let f = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
    let (rel_error, rel_error_bound) = acc.rel();
    BenchRow {
        trial,
        kind,
        shape,
        data: opts.data.to_string(),
        icblk: blk.icblk,
        rb: blk.rb_size,
        chain: blk.chain_length(spec),
        fma_count: out.stats.fma_count,
        convert_count: out.stats.convert_count,
        spill_count: out.stats.spill_count,
        overflow_count: out.stats.overflow_count,
        analytic_ratio: f(analytic),
        measured_ratio: f(measured),
        ratio_match: analytic == measured,
        int_exact: acc.exact,
        rel_error,
        rel_error_bound,
    }
}

fn sum_partials(p: &ChainPartials, n: usize, k: usize, y: usize, x: usize) -> i64 {
    (0..p.chunks()).map(|j| p.get(n, k, y, x, j) as i64).sum()
}

/// `trials` products of `m x k` by `k x n` matrices.
pub fn bench_gemm(m: usize, n: usize, k: usize, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    let spec = ConvSpec::gemm(m, n, k)?;
    let policy = opts.overflow_policy()?;
    let blk = opts.blocking(&spec, &policy);
    let q = opts.quant()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "bench-gemm"));
    let mut rows = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let a = sample(&mut rng, m * k, opts.data, &q).reshape(vec![m, k])?;
        let b = sample(&mut rng, k * n, opts.data, &q).reshape(vec![k, n])?;
        let aq = quantize_with_id(&a, &q, 0)?;
        let bq = quantize_with_id(&b, &q, 1)?;
        let (out, partials) = gemm_dfp_traced(&aq, &bq, &blk, &policy)?;
        let o = OracleInput {
            a: &a,
            b: &b,
            aq: &aq,
            bq: &bq,
        };
        let mut acc = Accum::new();
        for i in 0..m {
            for j in 0..n {
                let ps = sum_partials(&partials, 0, j, 0, i);
                acc.push(&o, (0..k).map(|p| (i * k + p, p * n + j)), out.output.data()[i * n + j], ps, partials.chunks());
            }
        }
        rows.push(row(trial, "gemm", format!("{m}x{n}x{k}"), opts, &spec, &blk, &out, &acc));
    }
    Ok(rows)
}

/// `trials` forward convolutions of a `batch x C x H x W` input.
pub fn bench_conv(spec: &ConvSpec, batch: usize, opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let policy = opts.overflow_policy()?;
    let blk = opts.blocking(spec, &policy);
    let q = opts.quant()?;
    let (c, kn, h, w, kh, kw) = (spec.in_channels, spec.out_channels, spec.height, spec.width, spec.kernel_h, spec.kernel_w);
    let (oh, ow) = (spec.out_h(), spec.out_w());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, "bench-conv"));
    let mut rows = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let x = sample(&mut rng, batch * c * h * w, opts.data, &q).reshape(vec![batch, c, h, w])?;
        let wt = sample(&mut rng, kn * c * kh * kw, opts.data, &q).reshape(vec![kn, c, kh, kw])?;
        let xq = quantize_with_id(&x, &q, 0)?;
        let wq = quantize_with_id(&wt, &q, 1)?;
        let packed = pack_weights(&wq, spec)?;
        let (out, partials) = conv_fprop_traced(&xq, &packed, spec, &blk, &policy)?;
        let o = OracleInput {
            a: &x,
            b: &wt,
            aq: &xq,
            bq: &wq,
        };
        let mut acc = Accum::new();
        for n in 0..batch {
            for k in 0..kn {
                for y in 0..oh {
                    for xo in 0..ow {
                        let pairs = (0..c).flat_map(|ci| (0..kh).flat_map(move |r| (0..kw).map(move |s| (ci, r, s))));
                        let pairs = pairs.filter_map(|(ci, r, s)| {
                            let iy = (y * spec.stride + r).checked_sub(spec.padding).filter(|&v| v < h)?;
                            let ix = (xo * spec.stride + s).checked_sub(spec.padding).filter(|&v| v < w)?;
                            Some((((n * c + ci) * h + iy) * w + ix, ((k * c + ci) * kh + r) * kw + s))
                        });
                        let got = out.output.data()[((n * kn + k) * oh + y) * ow + xo];
                        acc.push(&o, pairs, got, sum_partials(&partials, n, k, y, xo), partials.chunks());
                    }
                }
            }
        }
        let shape = format!("{c},{kn},{h},{w},{kh},{kw},{},{}", spec.stride, spec.padding);
        rows.push(row(trial, "conv", shape, opts, spec, &blk, &out, &acc));
    }
    Ok(rows)
}

/// Parses `C,K,H,W,KH,KW,S,pad`.
pub fn parse_conv_spec(s: &str) -> Result<ConvSpec> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| DfpError::Config(format!("bad number `{p}` in `{s}`"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [c, k, h, w, kh, kw, st, pad] => ConvSpec::new(c, k, h, w, kh, kw, st, pad),
        _ => Err(DfpError::Config(format!("expected C,K,H,W,KH,KW,S,pad, got `{s}`"))),
    }
}

pub fn write_rows<W: std::io::Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_rows_are_exact_and_within_bound() {
        let opts = BenchOptions {
            trials: 2,
            ..Default::default()
        };
        for r in bench_gemm(20, 17, 64, &opts).unwrap() {
            assert!(r.ratio_match && r.int_exact, "{r:?}");
            assert_eq!(r.overflow_count, 0);
            assert!(r.rel_error <= r.rel_error_bound, "{r:?}");
            assert!(r.rel_error > 0.0);
        }
    }

    #[test]
    fn conv_rows_are_exact_and_within_bound() {
        let spec = parse_conv_spec("8,16,6,6,3,3,1,1").unwrap();
        let opts = BenchOptions::default();
        let r = &bench_conv(&spec, 2, &opts).unwrap()[0];
        assert!(r.ratio_match && r.int_exact, "{r:?}");
        assert!(r.rel_error <= r.rel_error_bound);
    }

    #[test]
    fn strict_rejects_infeasible_blocking() {
        let opts = BenchOptions {
            policy: PolicyKind::Strict,
            chain: Some(8),
            icblk: Some(16),
            ..Default::default()
        };
        let err = bench_gemm(4, 16, 32, &opts).unwrap_err();
        assert!(err.to_string().contains("safe_chain_length"));
    }

    #[test]
    fn adversarial_inputs_are_maximal() {
        let q = QuantConfig::new(16, RoundingMode::Nearest, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = quantize_with_id(&sample(&mut rng, 4, BenchData::Adversarial, &q), &q, 0).unwrap();
        assert_eq!(t.data(), &[16383; 4]);
    }

    #[test]
    fn parse_spec() {
        assert_eq!(parse_conv_spec("3,4,5,6,3,3,1,1").unwrap().out_w(), 6);
        assert!(parse_conv_spec("3,4").is_err());
    }
}
