use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use dirac_disperse_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0u8; 512];
    let n = unsafe { dd_last_error(buf.as_mut_ptr().cast(), buf.len()) };
    assert!(n > 0);
    CStr::from_bytes_until_nul(&buf).unwrap().to_string_lossy().into_owned()
}

fn grid(n: usize, r: f64) -> *mut DdGrid {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { dd_grid_new(DD_GRID_UNIFORM_TENSOR, n, r, &mut g) }, DD_OK);
    g
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dd_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn grid_handles_and_validation_errors() {
    let g = grid(4, 2.0);
    assert_eq!(unsafe { dd_grid_len(g) }, 64);
    let mut p = [0.0; 3];
    let mut w = 0.0;
    assert_eq!(unsafe { dd_grid_point(g, 0, p.as_mut_ptr(), &mut w) }, DD_OK);
    assert_eq!(p, [-1.5, -1.5, -1.5]);
    assert_eq!(w, 1.0);
    assert_eq!(unsafe { dd_grid_point(g, 64, p.as_mut_ptr(), ptr::null_mut()) }, DD_ERR_VALIDATION);
    assert!(last_error().contains("out of range"));
    unsafe { dd_grid_free(g) };

    let mut bad = ptr::null_mut();
    assert_eq!(unsafe { dd_grid_new(DD_GRID_UNIFORM_TENSOR, 1, 2.0, &mut bad) }, DD_ERR_VALIDATION);
    assert!(bad.is_null());
    assert_eq!(unsafe { dd_grid_new(7, 4, 2.0, &mut bad) }, DD_ERR_VALIDATION);
    assert_eq!(unsafe { dd_grid_new(DD_GRID_UNIFORM_TENSOR, 4, 2.0, ptr::null_mut()) }, DD_ERR_NULL);
    assert_eq!(unsafe { dd_grid_len(ptr::null()) }, 0);
    unsafe { dd_grid_free(ptr::null_mut()) };
}

#[test]
fn free_density_at_coincident_points_is_the_exact_limit() {
    let mut out = [0.0; 32];
    let lambda = 0.3;
    assert_eq!(unsafe { dd_free_density(lambda, [0.0; 3].as_ptr(), out.as_mut_ptr()) }, DD_OK);
    let want = lambda * lambda / (4.0 * std::f64::consts::PI * std::f64::consts::PI);
    for r in 0..4 {
        for c in 0..4 {
            let (re, im) = (out[8 * r + 2 * c], out[8 * r + 2 * c + 1]);
            let diag = if r == c { want } else { 0.0 };
            assert!((re - diag).abs() < 1e-15 && im.abs() < 1e-15, "entry ({r}, {c})");
        }
    }
    assert_eq!(unsafe { dd_free_density(f64::NAN, [0.0; 3].as_ptr(), out.as_mut_ptr()) }, DD_ERR_VALIDATION);
    assert_eq!(unsafe { dd_free_density(0.1, ptr::null(), out.as_mut_ptr()) }, DD_ERR_NULL);
}

#[test]
fn zero_potential_is_regular_with_unit_sigma() {
    let g = grid(4, 2.0);
    let mut pot = ptr::null_mut();
    assert_eq!(unsafe { dd_potential_new(g, DD_FAMILY_ZERO, 0.0, 6.0, 0, &mut pot) }, DD_OK);
    assert_eq!(unsafe { dd_potential_is_zero(pot) }, 1);
    let mut th = ptr::null_mut();
    assert_eq!(unsafe { dd_classify(pot, g, 1e-6, &mut th) }, DD_OK);
    let mut info = DdThresholdInfo::default();
    assert_eq!(unsafe { dd_threshold_info(th, &mut info) }, DD_OK);
    assert_eq!(info, DdThresholdInfo { regular: 1, kernel_dimension: 0, sigma_min: 1.0, sigma_max: 1.0 });

    let mut needed = 0;
    assert_eq!(unsafe { dd_threshold_summary_json(th, ptr::null_mut(), 0, &mut needed) }, DD_ERR_BUFFER);
    let mut buf = vec![0u8; needed];
    assert_eq!(unsafe { dd_threshold_summary_json(th, buf.as_mut_ptr().cast(), needed, &mut needed) }, DD_OK);
    let text = CStr::from_bytes_until_nul(&buf).unwrap().to_str().unwrap();
    let v: serde_json::Value = serde_json::from_str(text).unwrap();
    assert_eq!(v["classification"], "regular");
    assert_eq!(v["kernel_dimension"], 0);

    let (x, y) = ([1.0, 0.5, 0.0], [0.0, 0.0, 0.25]);
    let mut a = [0.0; 32];
    let mut b = [0.0; 32];
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    assert_eq!(unsafe { dd_spectral_density(pot, g, th, 0.2, x.as_ptr(), y.as_ptr(), a.as_mut_ptr()) }, DD_OK);
    assert_eq!(unsafe { dd_free_density(0.2, d.as_ptr(), b.as_mut_ptr()) }, DD_OK);
    assert_eq!(a, b);
    unsafe {
        dd_threshold_free(th);
        dd_potential_free(pot);
        dd_grid_free(g);
    }
}

#[test]
fn perturbed_density_is_hermitian_in_the_point_swap() {
    let g = grid(4, 2.0);
    let mut pot = ptr::null_mut();
    assert_eq!(unsafe { dd_potential_new(g, DD_FAMILY_ISOTROPIC_SCALAR, 1.0, 6.0, 0, &mut pot) }, DD_OK);
    let mut th = ptr::null_mut();
    assert_eq!(unsafe { dd_classify(pot, g, 1e-6, &mut th) }, DD_OK);
    let (x, y) = ([0.7, -0.2, 0.1], [-0.4, 0.3, 0.9]);
    let mut kxy = [0.0; 32];
    let mut kyx = [0.0; 32];
    assert_eq!(unsafe { dd_spectral_density(pot, g, th, 0.3, x.as_ptr(), y.as_ptr(), kxy.as_mut_ptr()) }, DD_OK);
    assert_eq!(unsafe { dd_spectral_density(pot, g, th, 0.3, y.as_ptr(), x.as_ptr(), kyx.as_mut_ptr()) }, DD_OK);
    for r in 0..4 {
        for c in 0..4 {
            assert!((kxy[8 * r + 2 * c] - kyx[8 * c + 2 * r]).abs() < 1e-8);
            assert!((kxy[8 * r + 2 * c + 1] + kyx[8 * c + 2 * r + 1]).abs() < 1e-8);
        }
    }
    let other = grid(6, 2.0);
    let mut th2 = ptr::null_mut();
    assert_eq!(unsafe { dd_classify(pot, other, 1e-6, &mut th2) }, DD_ERR_VALIDATION);
    assert!(last_error().contains("different grid"));
    unsafe {
        dd_threshold_free(th);
        dd_potential_free(pot);
        dd_grid_free(g);
        dd_grid_free(other);
    }
}

#[test]
fn slope_fit_and_scan_report_through_out_parameters() {
    let t = [4.0, 8.0, 16.0, 32.0];
    let v: Vec<f64> = t.iter().map(|x: &f64| 3.0 * x.powf(-1.5)).collect();
    let (mut s, mut r) = (0.0, 0.0);
    assert_eq!(unsafe { dd_fit_log_slope(t.as_ptr(), v.as_ptr(), 4, 4.0, 32.0, &mut s, &mut r) }, DD_OK);
    assert!((s + 1.5).abs() < 1e-12 && r < 1e-12);
    assert_eq!(unsafe { dd_fit_log_slope(t.as_ptr(), v.as_ptr(), 4, 100.0, 200.0, &mut s, &mut r) }, DD_ERR_VALIDATION);

    let g = grid(4, 2.0);
    let mut bracket = [0.0; 2];
    let mut found = -1;
    let code = unsafe {
        dd_coupling_scan(g, DD_FAMILY_ISOTROPIC_SCALAR, 6.0, 0, 0.0, 1.0, 3, bracket.as_mut_ptr(), &mut found)
    };
    assert_eq!(code, DD_OK);
    assert_eq!(found, 0);
    unsafe { dd_grid_free(g) };
}

#[test]
fn cli_entry_point_returns_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{").unwrap();
    let out = dir.path().join("out");
    let args = [
        "dirac-disperse",
        "classify",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
    .map(|s| CString::new(s).unwrap());
    let ptrs: Vec<_> = args.iter().map(|s| s.as_ptr()).collect();
    assert_eq!(unsafe { dd_cli_run(ptrs.len() as i32, ptrs.as_ptr()) }, 2);
    assert!(!out.exists());
    assert_eq!(unsafe { dd_cli_run(1, ptr::null()) }, DD_ERR_NULL);
}

#[test]
fn header_declares_every_entry_point_and_compiles_as_c() {
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let header = std::fs::read_to_string(format!("{include}/dirac_disperse.h")).unwrap();
    for name in [
        "dd_version",
        "dd_last_error",
        "dd_grid_new",
        "dd_grid_free",
        "dd_potential_new",
        "dd_classify",
        "dd_threshold_info",
        "dd_threshold_summary_json",
        "dd_coupling_scan",
        "dd_free_density",
        "dd_spectral_density",
        "dd_fit_log_slope",
        "dd_cli_run",
        "typedef struct DdGrid DdGrid",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(
        &src,
        "#include \"dirac_disperse.h\"\nint main(void) { DdGrid *g = 0; (void)g; return dd_grid_len(0) == 0 ? 0 : 1; }\n",
    )
    .unwrap();
    let status = Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", include]).arg(&src).status();
    assert!(status.expect("a C compiler is available").success());
}
