//! C interface to `noisycur`.
//!
//! Matrices cross the boundary as row-major `double` buffers. Every function
//! returns an [`NcStatus`]; on failure the message is kept per thread and
//! read back with [`nc_last_error_message`]. Handles are opaque and must be
//! released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use noisycur::datasets::synthetic_lowrank;
use noisycur::harness::relative_error;
use noisycur::ncur::{log_grid, noisycur, noisycur_cv, NoisyCurConfig, Reconstruction};
use noisycur::observation::{plan_split, TwoCostModel};
use noisycur::rng::{SeedStreams, Stream};
use noisycur::{DenseMatrix, Error};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Infeasible = 5,
    BudgetExceeded = 6,
    Numerical = 7,
    Panic = 8,
    Other = 9,
}

/// Opaque dense matrix.
pub struct NcMatrix(DenseMatrix);

/// Opaque result of one reconstruction run.
pub struct NcReconstruction {
    rec: Reconstruction,
    lambda: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> NcStatus {
    match e {
        Error::Shape { .. } | Error::DimensionMismatch(_) => NcStatus::DimensionMismatch,
        Error::NonFinite { .. } => NcStatus::NonFinite,
        Error::InvalidArgument(_) | Error::Config(_) | Error::HypothesisUnmet(_) => NcStatus::InvalidArgument,
        Error::InfeasiblePlan(_) => NcStatus::Infeasible,
        Error::BudgetExceeded { .. } => NcStatus::BudgetExceeded,
        Error::Numerical(_) | Error::EmptyBasis | Error::ZeroMatrix(_) => NcStatus::Numerical,
        _ => NcStatus::Other,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (NcStatus, String)>) -> NcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            NcStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside noisycur".into());
            NcStatus::Panic
        }
    }
}

fn lib(e: Error) -> (NcStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NcStatus, String) {
    (NcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, (NcStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Length in bytes, without the terminator, of the calling thread's last
/// error message; zero when the last call succeeded.
#[no_mangle]
pub extern "C" fn nc_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(0, |c| c.as_bytes().len()))
}

/// Copies the last error message, NUL-terminated and truncated to fit, into
/// `buf`. Returns the number of bytes written without the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn nc_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_ref().map_or(&[][..], |c| c.as_bytes());
        let k = bytes.len().min(len - 1);
        ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, k);
        *buf.add(k) = 0;
        k
    })
}

/// Static version string.
#[no_mangle]
pub extern "C" fn nc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Copies `rows * cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_matrix_new(rows: usize, cols: usize, data: *const f64, out: *mut *mut NcMatrix) -> NcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = rows.checked_mul(cols).ok_or_else(|| lib(Error::InvalidArgument("matrix size overflows".into())))?;
        if data.is_null() && len > 0 {
            return Err(null("data"));
        }
        let values = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        let m = DenseMatrix::from_row_major(rows, cols, values).map_err(lib)?;
        emit(out, NcMatrix(m));
        Ok(())
    })
}

/// Rank-`rank` approximation of an i.i.d. N(mean, std^2) draw.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_matrix_synthetic(
    rows: usize,
    cols: usize,
    rank: usize,
    mean: f64,
    std: f64,
    seed: u64,
    out: *mut *mut NcMatrix,
) -> NcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut rng = SeedStreams::new(seed).rng(Stream::Dataset);
        let m = synthetic_lowrank(rows, cols, rank, mean, std, &mut rng).map_err(lib)?;
        emit(out, NcMatrix(m));
        Ok(())
    })
}

/// # Safety
/// `m` must come from this library and not be used afterwards; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn nc_matrix_free(m: *mut NcMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live matrix handle; `rows` and `cols` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_matrix_shape(m: *const NcMatrix, rows: *mut usize, cols: *mut usize) -> NcStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("shape output"));
        }
        *rows = m.0.rows();
        *cols = m.0.cols();
        Ok(())
    })
}

/// Copies the entries row-major into `buf`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle and `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn nc_matrix_copy(m: *const NcMatrix, buf: *mut f64, len: usize) -> NcStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        let data = m.0.to_row_major();
        if len != data.len() {
            return Err(lib(Error::DimensionMismatch(format!("buffer of {len} for {} entries", data.len()))));
        }
        if buf.is_null() && len > 0 {
            return Err(null("buf"));
        }
        if len > 0 {
            ptr::copy_nonoverlapping(data.as_ptr(), buf, len);
        }
        Ok(())
    })
}

/// `||A - B||_F / ||A||_F`; the absolute error when `A` is zero.
///
/// # Safety
/// Both handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_relative_error(a: *const NcMatrix, b: *const NcMatrix, out: *mut f64) -> NcStatus {
    guard(|| {
        let (a, b) = (deref(a, "a")?, deref(b, "b")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = relative_error(&a.0, &b.0).map_err(lib)?.value;
        Ok(())
    })
}

/// Sketched-row count and spend for `d` columns under a two-cost budget.
///
/// # Safety
/// `s` and `spent` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nc_plan_split(
    p_e: f64,
    p_c: f64,
    budget: f64,
    n: usize,
    d: usize,
    s: *mut usize,
    spent: *mut f64,
) -> NcStatus {
    guard(|| {
        if s.is_null() || spent.is_null() {
            return Err(null("plan output"));
        }
        let model = TwoCostModel::new(p_e, p_c, 0.0, 0.0, budget).map_err(lib)?;
        let plan = plan_split(&model, n, d).map_err(lib)?;
        *s = plan.s;
        *spent = plan.spent;
        Ok(())
    })
}

/// One reconstruction with a fixed ridge parameter.
///
/// # Safety
/// `a` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_noisycur(
    a: *const NcMatrix,
    d: usize,
    s: usize,
    sigma_c: f64,
    sigma_e: f64,
    lambda: f64,
    seed: u64,
    out: *mut *mut NcReconstruction,
) -> NcStatus {
    guard(|| {
        let a = deref(a, "a")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = NoisyCurConfig {
            d,
            s,
            sigma_c,
            sigma_e,
            lambda,
        };
        let rec = noisycur(&a.0, &cfg, &SeedStreams::new(seed)).map_err(lib)?;
        emit(out, NcReconstruction { rec, lambda });
        Ok(())
    })
}

/// One reconstruction with the ridge parameter chosen by `folds`-fold
/// cross-validation over `points` log-spaced values in `[lambda_lo, lambda_hi]`.
///
/// # Safety
/// `a` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_noisycur_cv(
    a: *const NcMatrix,
    d: usize,
    s: usize,
    sigma_c: f64,
    sigma_e: f64,
    lambda_lo: f64,
    lambda_hi: f64,
    points: usize,
    folds: usize,
    seed: u64,
    out: *mut *mut NcReconstruction,
) -> NcStatus {
    guard(|| {
        let a = deref(a, "a")?;
        if out.is_null() {
            return Err(null("out"));
        }
        if !(lambda_lo > 0.0 && lambda_hi >= lambda_lo) || points == 0 {
            return Err(lib(Error::InvalidArgument("empty lambda grid".into())));
        }
        let cfg = NoisyCurConfig {
            d,
            s,
            sigma_c,
            sigma_e,
            lambda: 0.0,
        };
        let grid = log_grid(lambda_lo, lambda_hi, points);
        let (rec, cv) = noisycur_cv(&a.0, &cfg, &grid, folds, &SeedStreams::new(seed)).map_err(lib)?;
        emit(
            out,
            NcReconstruction {
                rec,
                lambda: cv.best_lambda,
            },
        );
        Ok(())
    })
}

/// # Safety
/// `r` must come from this library and not be used afterwards; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn nc_reconstruction_free(r: *mut NcReconstruction) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// New matrix handle holding the estimate.
///
/// # Safety
/// `r` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_reconstruction_estimate(r: *const NcReconstruction, out: *mut *mut NcMatrix) -> NcStatus {
    guard(|| {
        let r = deref(r, "reconstruction")?;
        if out.is_null() {
            return Err(null("out"));
        }
        emit(out, NcMatrix(r.rec.a_bar.clone()));
        Ok(())
    })
}

/// Ridge parameter used for the fit.
///
/// # Safety
/// `r` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn nc_reconstruction_lambda(r: *const NcReconstruction, out: *mut f64) -> NcStatus {
    guard(|| {
        let r = deref(r, "reconstruction")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = r.lambda;
        Ok(())
    })
}
