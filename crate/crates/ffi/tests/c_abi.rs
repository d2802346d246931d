use std::ffi::CStr;
use std::ptr;

use dfp_ffi::*;

unsafe fn float(data: &[f32], shape: &[usize]) -> *mut DfpFloatTensor {
    let mut out = ptr::null_mut();
    let s = dfp_float_tensor_new(data.as_ptr(), data.len(), shape.as_ptr(), shape.len(), &mut out);
    assert_eq!(s, DfpStatus::Ok);
    out
}

unsafe fn quant(t: *const DfpFloatTensor) -> *mut DfpTensor {
    let mut q = ptr::null_mut();
    assert_eq!(dfp_quantize(t, 16, DfpRounding::Nearest, 0, 0, &mut q), DfpStatus::Ok);
    q
}

unsafe fn last_error() -> String {
    CStr::from_ptr(dfp_last_error_message()).to_string_lossy().into_owned()
}

#[test]
fn quantize_round_trip() {
    unsafe {
        let t = float(&[3.0, -1.5, 0.5], &[3]);
        let q = quant(t);
        assert_eq!(dfp_tensor_exponent(q), -13);
        assert_eq!(dfp_tensor_bits(q), 16);
        assert_eq!(std::slice::from_raw_parts(dfp_tensor_data(q), dfp_tensor_len(q)), &[24576, -12288, 4096]);
        assert_eq!(std::slice::from_raw_parts(dfp_tensor_shape(q), dfp_tensor_ndim(q)), &[3]);
        let mut back = ptr::null_mut();
        assert_eq!(dfp_dequantize(q, &mut back), DfpStatus::Ok);
        assert_eq!(std::slice::from_raw_parts(dfp_float_tensor_data(back), dfp_float_tensor_len(back)), &[3.0, -1.5, 0.5]);
        dfp_float_tensor_free(back);
        dfp_tensor_free(q);
        dfp_float_tensor_free(t);
    }
}

#[test]
fn gemm_matches_worked_example() {
    unsafe {
        let a = float(&[0.25, 0.5, 0.75, 1.0], &[2, 2]);
        let b = float(&[0.625, 0.75, 0.875, 1.0], &[2, 2]);
        let (qa, qb) = (quant(a), quant(b));
        let mut c = ptr::null_mut();
        let mut stats = DfpKernelStats::default();
        assert_eq!(dfp_gemm(qa, qb, 0, &mut c, &mut stats), DfpStatus::Ok);
        let got = std::slice::from_raw_parts(dfp_float_tensor_data(c), 4);
        assert_eq!(got, &[0.59375, 0.6875, 1.34375, 1.5625]);
        assert!(stats.fma_count > 0 && stats.convert_count > 0);
        assert_eq!(stats.overflow_count, 0);
        for p in [qa, qb] {
            dfp_tensor_free(p);
        }
        for p in [a, b, c] {
            dfp_float_tensor_free(p);
        }
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut out = ptr::null_mut();
        let s = dfp_float_tensor_new([f32::NAN].as_ptr(), 1, [1usize].as_ptr(), 1, &mut out);
        assert_eq!(s, DfpStatus::OutOfRange);
        assert!(out.is_null());
        assert!(last_error().contains("non-finite"), "{}", last_error());

        let s = dfp_float_tensor_new([1.0f32].as_ptr(), 1, [2usize].as_ptr(), 1, &mut out);
        assert_eq!(s, DfpStatus::ShapeMismatch);

        let mut q = ptr::null_mut();
        assert_eq!(dfp_quantize(ptr::null(), 16, DfpRounding::Nearest, 0, 0, &mut q), DfpStatus::NullPointer);
        assert!(last_error().contains("input"));

        let t = float(&[1.0], &[1]);
        assert_eq!(dfp_quantize(t, 17, DfpRounding::Nearest, 0, 0, &mut q), DfpStatus::InvalidArgument);
        dfp_float_tensor_free(t);

        let a = float(&[1.0; 6], &[2, 3]);
        let qa = quant(a);
        let mut c = ptr::null_mut();
        assert_eq!(dfp_gemm(qa, qa, 0, &mut c, ptr::null_mut()), DfpStatus::ShapeMismatch);
        assert!(c.is_null());
        dfp_tensor_free(qa);
        dfp_float_tensor_free(a);
    }
}

#[test]
fn safe_chain_lengths() {
    let mut n = 0u64;
    unsafe {
        assert_eq!(dfp_safe_chain_length(16, 1, &mut n), DfpStatus::Ok);
        assert_eq!(n, 8);
        assert_eq!(dfp_safe_chain_length(16, 0, &mut n), DfpStatus::Ok);
        assert_eq!(n, 2);
        assert_eq!(dfp_safe_chain_length(16, 0, ptr::null_mut()), DfpStatus::NullPointer);
    }
}

#[test]
fn free_accepts_null() {
    unsafe {
        dfp_tensor_free(ptr::null_mut());
        dfp_float_tensor_free(ptr::null_mut());
        assert_eq!(dfp_tensor_len(ptr::null()), 0);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/dfp.h")).unwrap();
    for f in [
        "dfp_last_error_message",
        "dfp_float_tensor_new",
        "dfp_quantize",
        "dfp_dequantize",
        "dfp_gemm",
        "dfp_safe_chain_length",
        "dfp_tensor_free",
        "typedef struct DfpTensor DfpTensor",
        "DFP_STATUS_OK = 0",
    ] {
        assert!(h.contains(f), "missing {f}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempdir();
    let src = dir.join("use.c");
    std::fs::write(
        &src,
        "#include \"dfp.h\"\nint main(void) { uint64_t n; return dfp_safe_chain_length(16, 1, &n) == DFP_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let st = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", inc])
        .arg(&src)
        .status()
        .unwrap();
    assert!(st.success());
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}

fn tempdir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("dfp-ffi-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
