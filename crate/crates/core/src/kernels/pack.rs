//! Kernel-friendly data layouts.
//!
//! Weights `(K, C, KH, KW)` are relaid as
//! `[C/16][K/16][KH][KW][8][16][2]`: the trailing pair walks two consecutive
//! input channels so one 32-lane register feeds the pairwise horizontal add.
//! Activations `(N, C, H, W)` become `[N][C/16][H+2p][W+2p][16]` with the
//! spatial padding materialized as zeros.

use crate::error::{DfpError, Result};
use crate::kernels::vnni::{WeightRegs, SIMD_WIDTH, VNNI_K};
use crate::kernels::ConvSpec;
use crate::tensor::DfpTensor;

pub(crate) fn round_up16(x: usize) -> usize {
    x.div_ceil(SIMD_WIDTH) * SIMD_WIDTH
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedWeights {
    rows: Vec<[i16; 2 * SIMD_WIDTH]>,
    exponent: i32,
    bits: u32,
    out_channels: usize,
    in_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
}

impl PackedWeights {
    pub fn exponent(&self) -> i32 {
        self.exponent
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }

    /// Channel counts after zero-padding to multiples of 16.
    pub fn padded_channels(&self) -> (usize, usize) {
        (round_up16(self.in_channels), round_up16(self.out_channels))
    }

    /// Flat element index of `W[k][c][r][s]` in the packed buffer.
    pub fn packed_index(&self, k: usize, c: usize, r: usize, s: usize) -> usize {
        self.row(c / 16, k / 16, r, s, (c % 16) / 2) * 2 * SIMD_WIDTH + (k % 16) * 2 + c % 2
    }

    fn row(&self, cblk: usize, kblk: usize, r: usize, s: usize, pair: usize) -> usize {
        let kb = round_up16(self.out_channels) / SIMD_WIDTH;
        (((cblk * kb + kblk) * self.kernel_h + r) * self.kernel_w + s) * 8 + pair
    }

    /// The four registers used by one instruction: channels
    /// `cblk*16 + ib*8 .. +8` against output channels `kblk*16 .. +16`.
    #[inline]
    pub(crate) fn regs(&self, cblk: usize, kblk: usize, r: usize, s: usize, ib: usize) -> &WeightRegs {
        let row = self.row(cblk, kblk, r, s, ib * VNNI_K);
        self.rows[row..row + VNNI_K]
            .try_into()
            .expect("four registers")
    }

    pub fn as_flat(&self) -> impl Iterator<Item = i16> + '_ {
        self.rows.iter().flat_map(|r| r.iter().copied())
    }

    /// Inverse of [`pack_weights`]; padded channels are dropped.
    pub fn unpack(&self) -> DfpTensor {
        let (k_n, c_n, kh, kw) = (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w);
        let mut data = Vec::with_capacity(k_n * c_n * kh * kw);
        for k in 0..k_n {
            for c in 0..c_n {
                for r in 0..kh {
                    for s in 0..kw {
                        let row = self.row(c / 16, k / 16, r, s, (c % 16) / 2);
                        data.push(self.rows[row][(k % 16) * 2 + c % 2]);
                    }
                }
            }
        }
        DfpTensor::from_raw(vec![k_n, c_n, kh, kw], data, self.exponent, self.bits)
    }
}

/// Relays `(K, C, KH, KW)` weights for the kernels, zero-padding channel
/// counts up to multiples of 16.
pub fn pack_weights(w: &DfpTensor, spec: &ConvSpec) -> Result<PackedWeights> {
    let expect = [spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w];
    if w.shape() != expect {
        return Err(DfpError::ShapeMismatch {
            left: w.shape().to_vec(),
            right: expect.to_vec(),
        });
    }
    let (k_n, c_n, kh, kw) = (expect[0], expect[1], expect[2], expect[3]);
    let mut packed = PackedWeights {
        rows: Vec::new(),
        exponent: w.exponent(),
        bits: w.bits(),
        out_channels: k_n,
        in_channels: c_n,
        kernel_h: kh,
        kernel_w: kw,
    };
    let (cp, kp) = packed.padded_channels();
    packed.rows = vec![[0; 2 * SIMD_WIDTH]; (cp / 16) * (kp / 16) * kh * kw * 8];
    let src = w.data();
    for k in 0..k_n {
        for c in 0..c_n {
            for r in 0..kh {
                for s in 0..kw {
                    let row = packed.row(c / 16, k / 16, r, s, (c % 16) / 2);
                    packed.rows[row][(k % 16) * 2 + c % 2] = src[((k * c_n + c) * kh + r) * kw + s];
                }
            }
        }
    }
    Ok(packed)
}

/// Channel-blocked, spatially padded activations.
#[derive(Debug, Clone)]
pub(crate) struct BlockedInput {
    pixels: Vec<[i16; SIMD_WIDTH]>,
    pub cblocks: usize,
    pub height: usize,
    pub width: usize,
}

impl BlockedInput {
    pub fn new(x: &DfpTensor, padding: usize) -> Result<Self> {
        let [n, c, h, w] = match *x.shape() {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(DfpError::Blocking(format!(
                    "expected NCHW input, got shape {:?}",
                    x.shape()
                )))
            }
        };
        let cb = round_up16(c) / SIMD_WIDTH;
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        let mut pixels = vec![[0i16; SIMD_WIDTH]; n * cb * hp * wp];
        let src = x.data();
        for ni in 0..n {
            for ci in 0..c {
                let plane = &src[(ni * c + ci) * h * w..][..h * w];
                let base = (ni * cb + ci / 16) * hp;
                for y in 0..h {
                    for xx in 0..w {
                        pixels[(base + y + padding) * wp + xx + padding][ci % 16] = plane[y * w + xx];
                    }
                }
            }
        }
        Ok(Self {
            pixels,
            cblocks: cb,
            height: hp,
            width: wp,
        })
    }

    #[inline]
    pub fn mem(&self, n: usize, cblk: usize, y: usize, x: usize, ib: usize) -> &[i16; 8] {
        let px = &self.pixels[((n * self.cblocks + cblk) * self.height + y) * self.width + x];
        px[ib * 8..ib * 8 + 8].try_into().expect("eight lanes")
    }
}
