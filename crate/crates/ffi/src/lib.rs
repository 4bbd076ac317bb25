//! C ABI for the dirac-disperse library.
//!
//! Objects cross the boundary as opaque handles created by `dd_*_new` or
//! `dd_classify` and released by the matching `dd_*_free`. Every fallible call
//! returns a status code; on failure the message is kept per thread and can be
//! copied out with [`dd_last_error`]. Panics never unwind into C.
//!
//! A 4×4 complex matrix is exchanged as 32 doubles, row-major, with the real and
//! imaginary parts of each entry adjacent.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dirac_disperse::algebra::{sub3, Mat4};
use dirac_disperse::cli::{main_with_args, CliError, EXIT_IO, EXIT_NUMERICAL};
use dirac_disperse::evolution::{fit_log_slope, free_density};
use dirac_disperse::grid::{build_grid, GridScheme, SpatialGrid};
use dirac_disperse::potential::{sample_potential, FactorizedPotential, FamilyKind, PotentialFamily};
use dirac_disperse::resolvent::spectral_density;
use dirac_disperse::threshold::{classify_threshold, coupling_scan, ThresholdReport};
use dirac_disperse::Error;

/// Success.
pub const DD_OK: i32 = 0;
/// A required pointer argument was null.
pub const DD_ERR_NULL: i32 = 1;
/// Invalid argument or precondition violation.
pub const DD_ERR_VALIDATION: i32 = 2;
/// Numerical failure (singular operator, lost hermiticity, insufficient resolution).
pub const DD_ERR_NUMERICAL: i32 = 3;
/// File system failure.
pub const DD_ERR_IO: i32 = 4;
/// Output buffer too small; the required size has been reported.
pub const DD_ERR_BUFFER: i32 = 5;
/// A panic was caught at the boundary.
pub const DD_ERR_PANIC: i32 = 6;

/// `N³` midpoint cells on `[-R, R]³`.
pub const DD_GRID_UNIFORM_TENSOR: u32 = 0;
/// Gauss–Legendre radius and polar angle with uniform azimuth on the ball of radius `R`.
pub const DD_GRID_RADIAL_SPHERICAL: u32 = 1;

pub const DD_FAMILY_ZERO: u32 = 0;
pub const DD_FAMILY_ISOTROPIC_SCALAR: u32 = 1;
pub const DD_FAMILY_DIAGONAL_SIGNATURE: u32 = 2;
pub const DD_FAMILY_OFF_DIAGONAL_COUPLING: u32 = 3;
pub const DD_FAMILY_RANDOM_HERMITIAN: u32 = 4;
pub const DD_FAMILY_GAUSSIAN_WELL: u32 = 5;

/// Opaque spatial grid.
pub struct DdGrid(SpatialGrid);

/// Opaque sampled and factorized potential.
pub struct DdPotential(FactorizedPotential);

/// Opaque threshold classification with its operators.
pub struct DdThreshold(ThresholdReport);

/// Scalar digest of a threshold classification.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DdThresholdInfo {
    /// 1 when zero energy is regular, 0 when it is an eigenvalue.
    pub regular: i32,
    pub kernel_dimension: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(code: i32, msg: impl Into<String>) -> i32 {
    set_error(msg.into());
    code
}

fn status(e: Error) -> i32 {
    let msg = e.to_string();
    let code = match CliError::from(e).exit_code() {
        EXIT_IO => DD_ERR_IO,
        EXIT_NUMERICAL => DD_ERR_NUMERICAL,
        _ => DD_ERR_VALIDATION,
    };
    fail(code, msg)
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), i32>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DD_OK,
        Ok(Err(code)) => code,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(DD_ERR_PANIC, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: dirac_disperse::Result<T>) -> Result<T, i32> {
    r.map_err(status)
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Result<&'a T, i32> {
    p.as_ref().ok_or_else(|| fail(DD_ERR_NULL, format!("{name} is null")))
}

unsafe fn point(p: *const f64, name: &str) -> Result<[f64; 3], i32> {
    if p.is_null() {
        return Err(fail(DD_ERR_NULL, format!("{name} is null")));
    }
    let s = std::slice::from_raw_parts(p, 3);
    Ok([s[0], s[1], s[2]])
}

unsafe fn write_matrix(m: &Mat4, out: *mut f64) {
    let s = std::slice::from_raw_parts_mut(out, 32);
    for r in 0..4 {
        for c in 0..4 {
            let z = m[(r, c)];
            s[8 * r + 2 * c] = z.re;
            s[8 * r + 2 * c + 1] = z.im;
        }
    }
}

fn family_kind(code: u32) -> Result<FamilyKind, i32> {
    Ok(match code {
        DD_FAMILY_ZERO => FamilyKind::Zero,
        DD_FAMILY_ISOTROPIC_SCALAR => FamilyKind::IsotropicScalar,
        DD_FAMILY_DIAGONAL_SIGNATURE => FamilyKind::DiagonalSignature,
        DD_FAMILY_OFF_DIAGONAL_COUPLING => FamilyKind::OffDiagonalCoupling,
        DD_FAMILY_RANDOM_HERMITIAN => FamilyKind::RandomHermitian,
        DD_FAMILY_GAUSSIAN_WELL => FamilyKind::GaussianWell,
        other => return Err(fail(DD_ERR_VALIDATION, format!("unknown potential family code {other}"))),
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full length including the NUL, or 0 if
/// no error has been recorded.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dd_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && len > 0 {
                let n = bytes.len().min(len);
                std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Builds a grid; `scheme` is one of the `DD_GRID_*` codes.
///
/// # Safety
/// `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_grid_new(scheme: u32, n: usize, box_radius: f64, out: *mut *mut DdGrid) -> i32 {
    guard(|| {
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        let scheme = match scheme {
            DD_GRID_UNIFORM_TENSOR => GridScheme::UniformTensor,
            DD_GRID_RADIAL_SPHERICAL => GridScheme::RadialSpherical,
            other => return Err(fail(DD_ERR_VALIDATION, format!("unknown grid scheme code {other}"))),
        };
        let grid = lift(build_grid(scheme, n, box_radius))?;
        *out = Box::into_raw(Box::new(DdGrid(grid)));
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from [`dd_grid_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dd_grid_free(grid: *mut DdGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Number of quadrature points, 0 for a null handle.
///
/// # Safety
/// `grid` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_grid_len(grid: *const DdGrid) -> usize {
    grid.as_ref().map_or(0, |g| g.0.len())
}

/// Writes point `index` into `out[0..3]` and its weight into `weight`.
///
/// # Safety
/// `grid` must be a live handle, `out` valid for 3 doubles and `weight` null or valid for one.
#[no_mangle]
pub unsafe extern "C" fn dd_grid_point(grid: *const DdGrid, index: usize, out: *mut f64, weight: *mut f64) -> i32 {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        if index >= g.len() {
            return Err(fail(DD_ERR_VALIDATION, format!("point index {index} out of range for {} points", g.len())));
        }
        std::slice::from_raw_parts_mut(out, 3).copy_from_slice(&g.points[index]);
        if !weight.is_null() {
            *weight = g.weights[index];
        }
        Ok(())
    })
}

/// Samples and factorizes a potential family on a grid.
///
/// # Safety
/// `grid` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_potential_new(
    grid: *const DdGrid,
    family: u32,
    coupling: f64,
    delta: f64,
    seed: u64,
    out: *mut *mut DdPotential,
) -> i32 {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        let fam = lift(PotentialFamily::new(family_kind(family)?, coupling, delta, seed))?;
        let pot = lift(sample_potential(&fam, g))?;
        *out = Box::into_raw(Box::new(DdPotential(pot)));
        Ok(())
    })
}

/// # Safety
/// `pot` must be null or a handle from [`dd_potential_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dd_potential_free(pot: *mut DdPotential) {
    if !pot.is_null() {
        drop(Box::from_raw(pot));
    }
}

/// 1 if the potential vanishes identically, 0 if not, -1 for a null handle.
///
/// # Safety
/// `pot` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dd_potential_is_zero(pot: *const DdPotential) -> i32 {
    pot.as_ref().map_or(-1, |p| i32::from(p.0.is_zero()))
}

/// Classifies zero energy; `tol` is the kernel tolerance relative to `σ_max`.
///
/// # Safety
/// `pot` and `grid` must be live handles for the same grid and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_classify(
    pot: *const DdPotential,
    grid: *const DdGrid,
    tol: f64,
    out: *mut *mut DdThreshold,
) -> i32 {
    guard(|| {
        let p = &deref(pot, "pot")?.0;
        let g = &deref(grid, "grid")?.0;
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        if p.grid != g.descriptor {
            return Err(fail(DD_ERR_VALIDATION, "potential was sampled on a different grid"));
        }
        let report = lift(classify_threshold(p, g, tol))?;
        *out = Box::into_raw(Box::new(DdThreshold(report)));
        Ok(())
    })
}

/// # Safety
/// `th` must be null or a handle from [`dd_classify`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dd_threshold_free(th: *mut DdThreshold) {
    if !th.is_null() {
        drop(Box::from_raw(th));
    }
}

/// # Safety
/// `th` must be a live handle and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_threshold_info(th: *const DdThreshold, out: *mut DdThresholdInfo) -> i32 {
    guard(|| {
        let r = &deref(th, "threshold")?.0;
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        *out = DdThresholdInfo {
            regular: i32::from(r.is_regular()),
            kernel_dimension: r.rank(),
            sigma_min: r.sigma_min(),
            sigma_max: r.sigma_max,
        };
        Ok(())
    })
}

/// Writes the JSON digest of the classification into `buf` with a trailing NUL.
/// `needed` receives the required size; [`DD_ERR_BUFFER`] is returned if `len` is smaller.
///
/// # Safety
/// `th` must be a live handle, `buf` null or valid for `len` bytes and `needed` null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_threshold_summary_json(
    th: *const DdThreshold,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> i32 {
    guard(|| {
        let r = &deref(th, "threshold")?.0;
        let text = lift(dirac_disperse::io::to_rounded_json(&r.summary()))?;
        let size = text.len() + 1;
        if !needed.is_null() {
            *needed = size;
        }
        if buf.is_null() || len < size {
            return Err(fail(DD_ERR_BUFFER, format!("summary needs {size} bytes, buffer has {len}")));
        }
        std::ptr::copy_nonoverlapping(text.as_ptr().cast(), buf, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Brackets the first critical coupling of a family in `[g_min, g_max]`.
/// `found` receives 1 and `bracket[0..2]` the bracket if one exists, else 0.
///
/// # Safety
/// `grid` must be a live handle, `bracket` valid for 2 doubles and `found` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn dd_coupling_scan(
    grid: *const DdGrid,
    family: u32,
    delta: f64,
    seed: u64,
    g_min: f64,
    g_max: f64,
    steps: usize,
    bracket: *mut f64,
    found: *mut i32,
) -> i32 {
    guard(|| {
        let g = &deref(grid, "grid")?.0;
        if bracket.is_null() || found.is_null() {
            return Err(fail(DD_ERR_NULL, "bracket or found is null"));
        }
        let fam = lift(PotentialFamily::new(family_kind(family)?, g_min, delta, seed))?;
        let scan = lift(coupling_scan(&fam, g, (g_min, g_max), steps))?;
        match scan.critical_g {
            Some([lo, hi]) => {
                *found = 1;
                *bracket = lo;
                *bracket.add(1) = hi;
            }
            None => *found = 0,
        }
        Ok(())
    })
}

/// Free spectral density `μ(λ)(x, y) / (2πi)` at separation `d = x - y`.
///
/// # Safety
/// `d` must be valid for 3 doubles and `out` for 32.
#[no_mangle]
pub unsafe extern "C" fn dd_free_density(lambda: f64, d: *const f64, out: *mut f64) -> i32 {
    guard(|| {
        let d = point(d, "d")?;
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        if !lambda.is_finite() || d.iter().any(|c| !c.is_finite()) {
            return Err(fail(DD_ERR_VALIDATION, "lambda and d must be finite"));
        }
        write_matrix(&free_density(lambda, d), out);
        Ok(())
    })
}

/// Perturbed spectral density `[R_V⁺ - R_V⁻](λ)(x, y) / (2πi)`.
///
/// # Safety
/// Handles must be live and belong together, `x` and `y` valid for 3 doubles, `out` for 32.
#[no_mangle]
pub unsafe extern "C" fn dd_spectral_density(
    pot: *const DdPotential,
    grid: *const DdGrid,
    th: *const DdThreshold,
    lambda: f64,
    x: *const f64,
    y: *const f64,
    out: *mut f64,
) -> i32 {
    guard(|| {
        let p = &deref(pot, "pot")?.0;
        let g = &deref(grid, "grid")?.0;
        let r = &deref(th, "threshold")?.0;
        let (x, y) = (point(x, "x")?, point(y, "y")?);
        if out.is_null() {
            return Err(fail(DD_ERR_NULL, "out is null"));
        }
        if p.grid != g.descriptor || r.t0.n_points != g.len() {
            return Err(fail(DD_ERR_VALIDATION, "handles were built on different grids"));
        }
        let m = if p.is_zero() {
            free_density(lambda, sub3(x, y))
        } else {
            lift(spectral_density(p, g, r, lambda, &[x], &[y]))?.kernel[0][0]
        };
        write_matrix(&m, out);
        Ok(())
    })
}

/// Least-squares slope of `log values` against `log times` over `[t_min, t_max]`.
///
/// # Safety
/// `times` and `values` must be valid for `n` doubles; `slope` and `residual` for a write each.
#[no_mangle]
pub unsafe extern "C" fn dd_fit_log_slope(
    times: *const f64,
    values: *const f64,
    n: usize,
    t_min: f64,
    t_max: f64,
    slope: *mut f64,
    residual: *mut f64,
) -> i32 {
    guard(|| {
        if times.is_null() || values.is_null() || slope.is_null() || residual.is_null() {
            return Err(fail(DD_ERR_NULL, "null argument"));
        }
        let t = std::slice::from_raw_parts(times, n);
        let v = std::slice::from_raw_parts(values, n);
        let (s, r) = lift(fit_log_slope(t, v, [t_min, t_max]))?;
        *slope = s;
        *residual = r;
        Ok(())
    })
}

/// Runs the command-line driver with `argv[0..argc]` and returns its exit status.
///
/// # Safety
/// `argv` must hold `argc` valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn dd_cli_run(argc: i32, argv: *const *const c_char) -> i32 {
    let args: Vec<String> = match usize::try_from(argc) {
        Ok(n) if !argv.is_null() => {
            (0..n).map(|k| CStr::from_ptr(*argv.add(k)).to_string_lossy().into_owned()).collect()
        }
        _ => return fail(DD_ERR_NULL, "argv is null or argc negative"),
    };
    match catch_unwind(|| main_with_args(args)) {
        Ok(code) => code,
        Err(_) => fail(DD_ERR_PANIC, "panic in command-line driver"),
    }
}
