//! C ABI over the `dfp` crate.
//!
//! Tensors cross the boundary as opaque heap handles created by this
//! library and released with the matching `_free` function. Every fallible
//! call returns a [`DfpStatus`]; on failure `dfp_last_error_message`
//! describes the error until the next failing call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dfp::arith::{safe_chain_length, OverflowPolicy};
use dfp::kernels::{gemm_dfp, BlockingParams, ConvSpec};
use dfp::tensor::{self as core, QuantConfig, RoundingMode};
use dfp::DfpError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    OutOfRange = 4,
    Policy = 5,
    Io = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DfpRounding {
    Nearest = 0,
    Stochastic = 1,
    Biased = 2,
}

/// Instruction counters of one kernel call.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DfpKernelStats {
    pub fma_count: u64,
    pub convert_count: u64,
    pub spill_count: u64,
    pub overflow_count: u64,
}

/// A shared-exponent integer tensor.
pub struct DfpTensor(core::DfpTensor);

/// A dense FP32 tensor.
pub struct DfpFloatTensor(core::FloatTensor);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &DfpError) -> DfpStatus {
    match e {
        DfpError::ShapeMismatch { .. } | DfpError::ElementCount { .. } => DfpStatus::ShapeMismatch,
        DfpError::ElementRange { .. }
        | DfpError::ExponentRange(_)
        | DfpError::ScaleRange(_)
        | DfpError::Fp32Overflow { .. }
        | DfpError::NonFinite { .. } => DfpStatus::OutOfRange,
        DfpError::StrictPolicy { .. } | DfpError::Blocking(_) => DfpStatus::Policy,
        DfpError::Io(_) | DfpError::Format { .. } => DfpStatus::Io,
        _ => DfpStatus::InvalidArgument,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), (DfpStatus, String)>) -> DfpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DfpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DfpStatus::Panic
        }
    }
}

fn lift(e: DfpError) -> (DfpStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DfpStatus, String) {
    (DfpStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (DfpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, v: T) {
    *out = Box::into_raw(Box::new(v));
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dfp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `len` floats into a new tensor of the given shape.
///
/// # Safety
/// `data` must point to `len` floats, `shape` to `ndim` sizes and `out` to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn dfp_float_tensor_new(
    data: *const f32,
    len: usize,
    shape: *const usize,
    ndim: usize,
    out: *mut *mut DfpFloatTensor,
) -> DfpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = slice(data, len, "data")?.to_vec();
        let shape = slice(shape, ndim, "shape")?.to_vec();
        let t = core::FloatTensor::new(shape, data).map_err(lift)?;
        put(out, DfpFloatTensor(t));
        Ok(())
    })
}

/// # Safety
/// `t` must be NULL or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dfp_float_tensor_free(t: *mut DfpFloatTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_float_tensor_len(t: *const DfpFloatTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Borrowed element pointer, valid while `t` lives.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_float_tensor_data(t: *const DfpFloatTensor) -> *const f32 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_free(t: *mut DfpTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_len(t: *const DfpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Borrowed element pointer, valid while `t` lives.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_data(t: *const DfpTensor) -> *const i16 {
    t.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Shared exponent, 0 for a NULL handle.
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_exponent(t: *const DfpTensor) -> i32 {
    t.as_ref().map_or(0, |t| t.0.exponent())
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_bits(t: *const DfpTensor) -> u32 {
    t.as_ref().map_or(0, |t| t.0.bits())
}

/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_ndim(t: *const DfpTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.shape().len())
}

/// Borrowed shape pointer (`dfp_tensor_ndim` entries).
///
/// # Safety
/// `t` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn dfp_tensor_shape(t: *const DfpTensor) -> *const usize {
    t.as_ref().map_or(ptr::null(), |t| t.0.shape().as_ptr())
}

/// Quantizes to `bits`-bit integers with one shared exponent. `seed` is
/// used only by stochastic rounding.
///
/// # Safety
/// `input` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dfp_quantize(
    input: *const DfpFloatTensor,
    bits: u32,
    rounding: DfpRounding,
    seed: u64,
    pre_shift: u32,
    out: *mut *mut DfpTensor,
) -> DfpStatus {
    guard(|| {
        let input = input.as_ref().ok_or_else(|| null("input"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mode = match rounding {
            DfpRounding::Nearest => RoundingMode::Nearest,
            DfpRounding::Stochastic => RoundingMode::Stochastic { seed },
            DfpRounding::Biased => RoundingMode::Biased,
        };
        let cfg = QuantConfig::new(bits, mode, pre_shift).map_err(lift)?;
        let q = core::quantize(&input.0, &cfg).map_err(lift)?;
        put(out, DfpTensor(q));
        Ok(())
    })
}

/// # Safety
/// `input` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn dfp_dequantize(input: *const DfpTensor, out: *mut *mut DfpFloatTensor) -> DfpStatus {
    guard(|| {
        let input = input.as_ref().ok_or_else(|| null("input"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        put(out, DfpFloatTensor(core::dequantize(&input.0).map_err(lift)?));
        Ok(())
    })
}

/// Longest INT32 chain of `bits`-bit products that cannot overflow.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dfp_safe_chain_length(bits: u32, pre_shift: u32, out: *mut u64) -> DfpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = safe_chain_length(bits, pre_shift).map_err(lift)?;
        Ok(())
    })
}

/// `A (M x K) * B (K x N)` with INT32 chains of `icblk` products (0 picks
/// the default blocking for a 200-product chain target). `stats` may be
/// NULL.
///
/// # Safety
/// `a` and `b` must be live handles, `out` writable, `stats` NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn dfp_gemm(
    a: *const DfpTensor,
    b: *const DfpTensor,
    icblk: usize,
    out: *mut *mut DfpFloatTensor,
    stats: *mut DfpKernelStats,
) -> DfpStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let (m, k, n) = match (a.0.shape(), b.0.shape()) {
            ([m, k], [_, n]) => (*m, *k, *n),
            _ => {
                return Err(lift(DfpError::ShapeMismatch {
                    left: a.0.shape().to_vec(),
                    right: b.0.shape().to_vec(),
                }))
            }
        };
        let policy = OverflowPolicy::default();
        let mut blk = BlockingParams::default_for(&ConvSpec::gemm(m, n, k).map_err(lift)?, &policy);
        if icblk != 0 {
            blk.icblk = icblk;
        }
        let r = gemm_dfp(&a.0, &b.0, &blk, &policy).map_err(lift)?;
        if let Some(s) = stats.as_mut() {
            *s = DfpKernelStats {
                fma_count: r.stats.fma_count,
                convert_count: r.stats.convert_count,
                spill_count: r.stats.spill_count,
                overflow_count: r.stats.overflow_count,
            };
        }
        put(out, DfpFloatTensor(r.output));
        Ok(())
    })
}
