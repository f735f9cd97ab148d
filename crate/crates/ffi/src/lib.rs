//! C ABI for the probmap likelihood kernels.
//!
//! Distributions live behind an opaque `ProbmapLrpd` handle created by
//! `probmap_lrpd_new` or `probmap_lrpd_from_json` and released with
//! `probmap_lrpd_free`. Every fallible call returns a `ProbmapStatus`; on
//! failure `probmap_last_error` describes what went wrong on this thread.
//! Matrices cross the boundary row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use probmap::metrics::chamfer;
use probmap::{Error, LrpdParams, Polyline};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbmapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Schema = 3,
    Numerical = 4,
    Panic = 5,
}

/// Opaque low-rank plus diagonal Gaussian.
pub struct ProbmapLrpd {
    params: LrpdParams,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(ProbmapStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Numerical(_) | Error::Undefined(_) => ProbmapStatus::Numerical,
            Error::Schema(_) | Error::Json(_) => ProbmapStatus::Schema,
            _ => ProbmapStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ProbmapStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ProbmapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ProbmapStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ProbmapStatus::Panic
        }
    }
}

unsafe fn handle<'a>(p: *const ProbmapLrpd) -> Result<&'a ProbmapLrpd, Fail> {
    p.as_ref().ok_or_else(|| null("handle"))
}

unsafe fn input<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn write<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = v;
    Ok(())
}

fn vector(p: &LrpdParams, v: &[f64]) -> Result<DVector<f64>, Fail> {
    if v.len() != p.n_coords() {
        return Err(Fail(
            ProbmapStatus::InvalidArgument,
            format!("expected {} coordinates, got {}", p.n_coords(), v.len()),
        ));
    }
    Ok(DVector::from_column_slice(v))
}

fn boxed(params: LrpdParams) -> *mut ProbmapLrpd {
    Box::into_raw(Box::new(ProbmapLrpd { params }))
}

/// Build a distribution from `mu` and `log_d` (length `n_coords`) and the
/// row-major `n_coords × rank` factor `l`.
///
/// # Safety
/// The arrays must hold the stated number of doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_new(
    n_coords: usize,
    rank: usize,
    mu: *const f64,
    log_d: *const f64,
    l: *const f64,
    kappa: f64,
    out: *mut *mut ProbmapLrpd,
) -> ProbmapStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mu = DVector::from_column_slice(input(mu, n_coords, "mu")?);
        let log_d = DVector::from_column_slice(input(log_d, n_coords, "log_d")?);
        let l = DMatrix::from_row_slice(n_coords, rank, input(l, n_coords * rank, "l")?);
        let params = LrpdParams::new(mu, log_d, l, kappa)?;
        *out = boxed(params);
        Ok(())
    })
}

/// Parse the JSON form written by the library and the CLI.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_from_json(json: *const c_char, out: *mut *mut ProbmapLrpd) -> ProbmapStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| Fail(ProbmapStatus::Schema, "json is not UTF-8".into()))?;
        *out = boxed(LrpdParams::from_json(text)?);
        Ok(())
    })
}

/// Serialise to JSON. Release the string with `probmap_string_free`.
///
/// # Safety
/// `p` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_to_json(p: *const ProbmapLrpd, out: *mut *mut c_char) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let s = h.params.to_json()?;
        let c = CString::new(s).map_err(|e| Fail(ProbmapStatus::Schema, e.to_string()))?;
        write(out, c.into_raw(), "out")
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_free(p: *mut ProbmapLrpd) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Length of `mu`, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_n_coords(p: *const ProbmapLrpd) -> usize {
    p.as_ref().map_or(0, |h| h.params.n_coords())
}

/// Columns of the factor, or 0 for a null handle.
///
/// # Safety
/// `p` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_rank(p: *const ProbmapLrpd) -> usize {
    p.as_ref().map_or(0, |h| h.params.rank())
}

/// # Safety
/// `p` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_logdet(p: *const ProbmapLrpd, out: *mut f64) -> ProbmapStatus {
    guard(|| {
        let v = handle(p)?.params.logdet()?;
        write(out, v, "out")
    })
}

/// `rᵀΣ⁻¹r` for a residual of length `len`.
///
/// # Safety
/// `r` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_mahalanobis(
    p: *const ProbmapLrpd,
    r: *const f64,
    len: usize,
    out: *mut f64,
) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let r = vector(&h.params, input(r, len, "r")?)?;
        write(out, h.params.mahalanobis(&r)?, "out")
    })
}

/// Negative log-likelihood of `target`, optionally with the `2N·ln 2π` term.
///
/// # Safety
/// `target` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_nll(
    p: *const ProbmapLrpd,
    target: *const f64,
    len: usize,
    include_normalizer: bool,
    out: *mut f64,
) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let t = vector(&h.params, input(target, len, "target")?)?;
        write(out, h.params.nll(&t, include_normalizer)?, "out")
    })
}

/// NLL and its gradient. `d_mu`, `d_log_d` take `n_coords` doubles, `d_l`
/// takes `n_coords × rank` row-major.
///
/// # Safety
/// Every pointer must be valid for the sizes above.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_nll_grad(
    p: *const ProbmapLrpd,
    target: *const f64,
    len: usize,
    value: *mut f64,
    d_mu: *mut f64,
    d_log_d: *mut f64,
    d_l: *mut f64,
    d_kappa: *mut f64,
) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let t = vector(&h.params, input(target, len, "target")?)?;
        let (n, r) = (h.params.n_coords(), h.params.rank());
        let dm = output(d_mu, n, "d_mu")?;
        let dd = output(d_log_d, n, "d_log_d")?;
        let dl = output(d_l, n * r, "d_l")?;
        if value.is_null() || d_kappa.is_null() {
            return Err(null("value or d_kappa"));
        }
        let g = h.params.nll_grad(&t)?;
        dm.copy_from_slice(g.d_mu.as_slice());
        dd.copy_from_slice(g.d_log_d.as_slice());
        for i in 0..n {
            for j in 0..r {
                dl[i * r + j] = g.d_l[(i, j)];
            }
        }
        *value = g.value;
        *d_kappa = g.d_kappa;
        Ok(())
    })
}

/// `count` seeded draws written row-major into `out` (`count × n_coords`).
///
/// # Safety
/// `out` must hold `count × n_coords` doubles.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_sample(
    p: *const ProbmapLrpd,
    seed: u64,
    count: usize,
    out: *mut f64,
) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let n = h.params.n_coords();
        let buf = output(out, count * n, "out")?;
        for (row, s) in buf.chunks_exact_mut(n.max(1)).zip(h.params.sample(seed, count)) {
            row.copy_from_slice(s.as_slice());
        }
        Ok(())
    })
}

/// Dense `n_coords × n_coords` covariance, row-major.
///
/// # Safety
/// `out` must hold `n_coords²` doubles.
#[no_mangle]
pub unsafe extern "C" fn probmap_lrpd_dense_cov(p: *const ProbmapLrpd, out: *mut f64) -> ProbmapStatus {
    guard(|| {
        let h = handle(p)?;
        let n = h.params.n_coords();
        let buf = output(out, n * n, "out")?;
        let c = h.params.dense_cov();
        for i in 0..n {
            for j in 0..n {
                buf[i * n + j] = c[(i, j)];
            }
        }
        Ok(())
    })
}

unsafe fn polyline(p: *const f64, n_points: usize, what: &str) -> Result<Polyline, Fail> {
    let flat = input(p, 2 * n_points, what)?;
    Ok(Polyline::unflatten(flat)?)
}

/// Bidirectional Chamfer distance between two polylines given as
/// interleaved `x, y` arrays.
///
/// # Safety
/// `a` must hold `2 × a_points` doubles and `b` `2 × b_points`.
#[no_mangle]
pub unsafe extern "C" fn probmap_chamfer(
    a: *const f64,
    a_points: usize,
    b: *const f64,
    b_points: usize,
    out: *mut f64,
) -> ProbmapStatus {
    guard(|| {
        let pa = polyline(a, a_points, "a")?;
        let pb = polyline(b, b_points, "b")?;
        write(out, chamfer(&pa, &pb), "out")
    })
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn probmap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn probmap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn probmap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
