//! Portable emulation of the 4-step INT16 pair-FMA instruction.
//!
//! One call reads 8 consecutive INT16 values from memory and four 32-lane
//! INT16 registers, and adds 8 products into each of 16 INT32 output lanes:
//!
//! ```text
//! for v in 0..4:
//!   for o in 0..16:
//!     vout[o] += vinp2[v][2o] * mem[2v] + vinp2[v][2o+1] * mem[2v+1]
//! ```

pub const SIMD_WIDTH: usize = 16;
pub const VNNI_K: usize = 4;
/// Products accumulated into each lane per call.
pub const PRODUCTS_PER_LANE: usize = 2 * VNNI_K;

pub type Lanes = [i32; SIMD_WIDTH];
pub type WeightRegs = [[i16; 2 * SIMD_WIDTH]; VNNI_K];

/// Wrapping INT32 semantics, like the hardware.
#[inline(always)]
pub fn vnni_madd(mem: &[i16; 8], vinp2: &WeightRegs, vout: &mut Lanes) {
    for v in 0..VNNI_K {
        let m0 = mem[2 * v] as i32;
        let m1 = mem[2 * v + 1] as i32;
        let w = &vinp2[v];
        for o in 0..SIMD_WIDTH {
            let pair = (w[2 * o] as i32 * m0).wrapping_add(w[2 * o + 1] as i32 * m1);
            vout[o] = vout[o].wrapping_add(pair);
        }
    }
}

/// 64-bit mirror of a register's lanes since the last spill.
///
/// A lane trips when any prefix of its chain, in the instruction's fixed
/// product order, leaves the signed 32-bit range.
#[derive(Debug, Clone, Copy, Default)]
pub struct LaneShadow {
    exact: [i64; SIMD_WIDTH],
    tripped: u16,
}

impl LaneShadow {
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn overflowed_lanes(&self) -> u32 {
        self.tripped.count_ones()
    }

    pub fn exact(&self) -> &[i64; SIMD_WIDTH] {
        &self.exact
    }
}

#[inline(always)]
fn out_of_range(x: i64) -> bool {
    x < i32::MIN as i64 || x > i32::MAX as i64
}

/// [`vnni_madd`] plus the 64-bit excursion check.
#[inline]
pub fn vnni_madd_shadow(
    mem: &[i16; 8],
    vinp2: &WeightRegs,
    vout: &mut Lanes,
    shadow: &mut LaneShadow,
) {
    vnni_madd(mem, vinp2, vout);
    for v in 0..VNNI_K {
        let m0 = mem[2 * v] as i64;
        let m1 = mem[2 * v + 1] as i64;
        let w = &vinp2[v];
        for o in 0..SIMD_WIDTH {
            let a = shadow.exact[o] + w[2 * o] as i64 * m0;
            let b = a + w[2 * o + 1] as i64 * m1;
            shadow.exact[o] = b;
            if out_of_range(a) || out_of_range(b) {
                shadow.tripped |= 1 << o;
            }
        }
    }
}
