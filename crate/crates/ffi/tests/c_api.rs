use std::ffi::CString;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use gridmath_ffi::*;

fn last_error() -> String {
    unsafe {
        let n = gm_last_error(ptr::null_mut(), 0);
        let mut buf = vec![0u8; n + 1];
        gm_last_error(buf.as_mut_ptr().cast(), buf.len());
        String::from_utf8(buf[..n].to_vec()).unwrap()
    }
}

#[test]
fn gemm_round_trip_through_the_abi() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(gm_session_new(3, true, &mut s), GmStatus::Ok);
        assert_eq!(gm_session_workers(s), 3);
        let (mut a, mut b, mut c) = (0, 0, 0);
        assert_eq!(gm_matrix_create(s, 2, 3, GmPrecision::Double, GmLayout::RowBlock, &mut a), GmStatus::Ok);
        assert_eq!(gm_matrix_create(s, 3, 2, GmPrecision::Double, GmLayout::Grid, &mut b), GmStatus::Ok);
        assert_eq!(gm_matrix_create(s, 2, 2, GmPrecision::Double, GmLayout::Single, &mut c), GmStatus::Ok);
        let av = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let bv = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        assert_eq!(gm_matrix_set(s, a, av.as_ptr(), 6), GmStatus::Ok);
        assert_eq!(gm_matrix_set(s, b, bv.as_ptr(), 6), GmStatus::Ok);
        assert_eq!(gm_gemm(s, a, b, c, 1.0, 0.0, false, false), GmStatus::Ok);
        let mut out = [0.0; 4];
        assert_eq!(gm_matrix_get(s, c, out.as_mut_ptr(), 4), GmStatus::Ok);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
        assert_eq!(gm_replicate(s, b), GmStatus::Ok);
        assert_eq!(gm_matrix_destroy(s, a), GmStatus::Ok);
        gm_session_free(s);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(gm_session_new(0, true, &mut s), GmStatus::Transport);
        assert!(!last_error().is_empty());
        assert_eq!(gm_session_new(2, true, ptr::null_mut()), GmStatus::NullPointer);
        assert_eq!(gm_session_new(2, true, &mut s), GmStatus::Ok);
        let mut out = [0.0; 4];
        assert_eq!(gm_matrix_get(s, 999, out.as_mut_ptr(), 4), GmStatus::UnknownMatrix);
        assert!(last_error().contains("999"), "{}", last_error());
        let mut m = 0;
        assert_eq!(gm_matrix_create(s, 2, 2, GmPrecision::Single, GmLayout::RowBlock, &mut m), GmStatus::Ok);
        assert_eq!(gm_matrix_set(s, m, out.as_ptr(), 3), GmStatus::InvalidArgument);
        assert_eq!(gm_matrix_get(s, m, out.as_mut_ptr(), 5), GmStatus::InvalidArgument);
        assert_eq!(gm_gemm(ptr::null_mut(), m, m, m, 1.0, 0.0, false, false), GmStatus::NullPointer);
        let mut tiny = [0u8; 4];
        let full = gm_last_error(tiny.as_mut_ptr().cast(), tiny.len());
        assert!(full > 3);
        assert_eq!(tiny[3], 0);
        gm_session_free(s);
        gm_session_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_restores_on_other_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.dmck").to_str().unwrap()).unwrap();
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(gm_session_new(4, true, &mut s), GmStatus::Ok);
        let mut m = 0;
        assert_eq!(gm_matrix_create(s, 5, 7, GmPrecision::Half, GmLayout::Grid, &mut m), GmStatus::Ok);
        assert_eq!(gm_fill_uniform(s, m, 3, -1.0, 1.0), GmStatus::Ok);
        let mut before = [0.0; 35];
        assert_eq!(gm_matrix_get(s, m, before.as_mut_ptr(), 35), GmStatus::Ok);
        assert_eq!(gm_checkpoint(s, path.as_ptr()), GmStatus::Ok);
        gm_session_free(s);
        let mut r = ptr::null_mut();
        assert_eq!(gm_session_restore(path.as_ptr(), 2, &mut r), GmStatus::Ok);
        let mut after = [0.0; 35];
        assert_eq!(gm_matrix_get(r, m, after.as_mut_ptr(), 35), GmStatus::Ok);
        assert_eq!(before.map(f64::to_bits), after.map(f64::to_bits));
        gm_session_free(r);
        let missing = CString::new("/nonexistent/x.dmck").unwrap();
        assert_eq!(gm_session_restore(missing.as_ptr(), 2, &mut r), GmStatus::Io);
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    // target/<profile>/deps/<test binary>
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_header() {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let lib = target_dir();
    assert!(lib.join("libgridmath_ffi.so").exists(), "cdylib missing in {}", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include "gridmath.h"
#include <stdio.h>
int main(void) {
    GmSession *s = NULL;
    if (gm_session_new(2, true, &s) != GM_STATUS_OK) return 1;
    uint64_t a, c;
    gm_matrix_create(s, 2, 2, GM_PRECISION_SINGLE, GM_LAYOUT_ROW_BLOCK, &a);
    gm_matrix_create(s, 2, 2, GM_PRECISION_SINGLE, GM_LAYOUT_COL_BLOCK, &c);
    double v[4] = {1, 2, 3, 4}, out[4];
    gm_matrix_set(s, a, v, 4);
    if (gm_gemm(s, a, a, c, 1.0, 0.0, false, false) != GM_STATUS_OK) return 2;
    gm_matrix_get(s, c, out, 4);
    if (gm_matrix_get(s, 77, out, 4) != GM_STATUS_UNKNOWN_MATRIX) return 3;
    char msg[128];
    gm_last_error(msg, sizeof msg);
    printf("%g %g %g %g|%s\n", out[0], out[1], out[2], out[3], msg);
    gm_session_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let exe = dir.path().join("main");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg("-L")
        .arg(&lib)
        .arg("-lgridmath_ffi")
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success());
    let out = Command::new(&exe).env("LD_LIBRARY_PATH", &lib).output().unwrap();
    assert!(out.status.success(), "{:?}", out);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), "7 10 15 22|unknown matrix 77\n");
}
