//! C interface to the `gdt-core` solver.
//!
//! Every fallible call returns a [`GdtStatus`]; on failure the message is kept
//! per thread and can be read with [`gdt_last_error_message`]. Matrices and
//! reports are opaque handles owned by the caller and released with their
//! `_free` function. Matrix data crosses the boundary in row-major order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gdt_core::experiment::lasso_then_gdt;
use gdt_core::linalg::{hard_threshold_rows, subspace_distance, FactorPair};
use gdt_core::{io, GdtConfig, GdtError, LassoConfig, Mat, MtlObjective, SolveReport};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GdtStatus {
    Ok = 0,
    NullPointer = 1,
    DimensionMismatch = 2,
    NonFinite = 3,
    InvalidConfig = 4,
    /// SVD failure, divergence or a degenerate initial point.
    Numerical = 5,
    Io = 6,
    Parse = 7,
    Panic = 8,
}

/// Dense row-major matrix.
pub struct GdtMat(Mat);

/// Outcome of [`gdt_mtl_solve`].
pub struct GdtReport {
    report: SolveReport,
    objective: f64,
}

/// Solver settings. Non-positive `eta` or `lambda` select the automatic rule.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GdtSolveConfig {
    pub rank: usize,
    pub s1: usize,
    pub s2: usize,
    pub eta: f64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub lambda: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &GdtError) -> GdtStatus {
    match err {
        GdtError::DimensionMismatch { .. } | GdtError::InvalidData { .. } => GdtStatus::DimensionMismatch,
        GdtError::NonFinite { .. } | GdtError::NonFiniteGradient { .. } => GdtStatus::NonFinite,
        GdtError::InvalidConfig(_) => GdtStatus::InvalidConfig,
        GdtError::SvdNotConverged { .. }
        | GdtError::Diverged { .. }
        | GdtError::DegenerateInit(_)
        | GdtError::ReplicationsFailed { .. } => GdtStatus::Numerical,
        GdtError::Io { .. } => GdtStatus::Io,
        GdtError::Parse { .. } | GdtError::Json(_) => GdtStatus::Parse,
    }
}

fn guard(f: impl FnOnce() -> Result<(), GdtStatus>) -> GdtStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GdtStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => {
            set_error("internal panic".into());
            GdtStatus::Panic
        }
    }
}

fn fail(err: GdtError) -> GdtStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

unsafe fn borrow<'a, T>(p: *const T, name: &str) -> Result<&'a T, GdtStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        Err(GdtStatus::NullPointer)
    } else {
        Ok(&*p)
    }
}

unsafe fn out_ptr<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, GdtStatus> {
    if p.is_null() {
        set_error(format!("{name} is null"));
        Err(GdtStatus::NullPointer)
    } else {
        Ok(&mut *p)
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<String, GdtStatus> {
    borrow(p, "path")?;
    CStr::from_ptr(p).to_str().map(str::to_owned).map_err(|_| {
        set_error("path is not valid UTF-8".into());
        GdtStatus::InvalidConfig
    })
}

fn boxed_mat(m: Mat) -> *mut GdtMat {
    Box::into_raw(Box::new(GdtMat(m)))
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn gdt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut GdtMat) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let len = rows.checked_mul(cols).ok_or_else(|| {
            set_error("rows * cols overflows".into());
            GdtStatus::DimensionMismatch
        })?;
        let values = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(borrow(data, "data")?, len).to_vec()
        };
        let m = Mat::new(rows, cols, values).map_err(fail)?;
        *out = boxed_mat(m);
        Ok(())
    })
}

/// Releases a matrix. NULL is ignored.
///
/// # Safety
/// `m` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_free(m: *mut GdtMat) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of rows, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_rows(m: *const GdtMat) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// Number of columns, or 0 for NULL.
///
/// # Safety
/// `m` must be NULL or a live matrix handle.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_cols(m: *const GdtMat) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the row-major entries into `buf`, which must hold `len == rows * cols` doubles.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_copy_data(m: *const GdtMat, buf: *mut f64, len: usize) -> GdtStatus {
    guard(|| {
        let m = &borrow(m, "matrix")?.0;
        let src = m.as_slice();
        if len != src.len() {
            set_error(format!("buffer holds {len} values, matrix has {}", src.len()));
            return Err(GdtStatus::DimensionMismatch);
        }
        if len > 0 {
            std::slice::from_raw_parts_mut(out_ptr(buf, "buf")?, len).copy_from_slice(src);
        }
        Ok(())
    })
}

/// Reads a numeric CSV file (no header).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_read_csv(path: *const c_char, out: *mut *mut GdtMat) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = io::read_matrix_csv(path_arg(path)?).map_err(fail)?;
        *out = boxed_mat(m);
        Ok(())
    })
}

/// Writes a matrix as CSV.
///
/// # Safety
/// `m` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gdt_mat_write_csv(m: *const GdtMat, path: *const c_char) -> GdtStatus {
    guard(|| {
        let m = &borrow(m, "matrix")?.0;
        io::write_matrix_csv(path_arg(path)?, m).map_err(fail)
    })
}

/// Keeps the `s` rows with largest ℓ₂ norm (ties to the lower index) and zeroes the rest.
///
/// # Safety
/// `m` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_hard_threshold_rows(m: *const GdtMat, s: usize, out: *mut *mut GdtMat) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let m = &borrow(m, "matrix")?.0;
        *out = boxed_mat(hard_threshold_rows(m, s));
        Ok(())
    })
}

/// Rotation-aligned distance between the stacked pairs `[U; V]` and `[U*; V*]`.
///
/// # Safety
/// All matrix arguments must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_subspace_distance(
    u: *const GdtMat,
    v: *const GdtMat,
    u_star: *const GdtMat,
    v_star: *const GdtMat,
    out: *mut f64,
) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let z = FactorPair::new(borrow(u, "u")?.0.clone(), borrow(v, "v")?.0.clone()).map_err(fail)?;
        let z_star =
            FactorPair::new(borrow(u_star, "u_star")?.0.clone(), borrow(v_star, "v_star")?.0.clone()).map_err(fail)?;
        *out = subspace_distance(&z, &z_star).map_err(fail)?;
        Ok(())
    })
}

/// Defaults: rank and budgets unset (must be filled in), automatic step and
/// penalty, 500 iterations, no early stop.
#[no_mangle]
pub extern "C" fn gdt_solve_config_default() -> GdtSolveConfig {
    let g = GdtConfig::default();
    GdtSolveConfig {
        rank: g.rank,
        s1: g.s1,
        s2: g.s2,
        eta: 0.0,
        max_iters: g.max_iters,
        rel_tol: g.rel_tol,
        lambda: 0.0,
    }
}

/// Fits `Y ≈ XΘ` with `Θ` low rank and row/column sparse: lasso
/// initialization followed by thresholded factored gradient descent.
///
/// # Safety
/// `x` and `y` must be live handles, `cfg` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_mtl_solve(
    x: *const GdtMat,
    y: *const GdtMat,
    cfg: *const GdtSolveConfig,
    out: *mut *mut GdtReport,
) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = ptr::null_mut();
        let x = &borrow(x, "x")?.0;
        let y = &borrow(y, "y")?.0;
        let c = *borrow(cfg, "cfg")?;
        let gdt = GdtConfig {
            rank: c.rank,
            s1: c.s1,
            s2: c.s2,
            eta: (c.eta > 0.0).then_some(c.eta),
            max_iters: c.max_iters,
            rel_tol: c.rel_tol,
            ..GdtConfig::default()
        };
        let lasso = LassoConfig {
            lambda: (c.lambda > 0.0).then_some(c.lambda),
            ..LassoConfig::default()
        };
        let (_, report) = lasso_then_gdt(x, y, &gdt, &lasso, None).map_err(fail)?;
        let objective = MtlObjective::new(x.clone(), y.clone())
            .map_err(fail)?
            .residual_value(&report.theta_hat);
        *out = Box::into_raw(Box::new(GdtReport { report, objective }));
        Ok(())
    })
}

/// Releases a report. NULL is ignored.
///
/// # Safety
/// `r` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn gdt_report_free(r: *mut GdtReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Copies the estimate `Θ` into a new matrix.
///
/// # Safety
/// `r` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gdt_report_theta(r: *const GdtReport, out: *mut *mut GdtMat) -> GdtStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed_mat(borrow(r, "report")?.report.theta_hat.clone());
        Ok(())
    })
}

/// Iterations performed, or 0 for NULL.
///
/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gdt_report_iterations(r: *const GdtReport) -> usize {
    r.as_ref().map_or(0, |r| r.report.iterations_run)
}

/// `(1/2n)‖Y − XΘ‖²_F` at the estimate, or NaN for NULL.
///
/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gdt_report_objective(r: *const GdtReport) -> f64 {
    r.as_ref().map_or(f64::NAN, |r| r.objective)
}

/// 1 if the relative-change tolerance stopped the run, else 0.
///
/// # Safety
/// `r` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gdt_report_converged(r: *const GdtReport) -> i32 {
    r.as_ref().map_or(0, |r| r.report.converged as i32)
}
