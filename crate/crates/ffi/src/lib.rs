//! C ABI over `sparse-steer`.
//!
//! Bundles, models and classifier heads are exposed as opaque handles that
//! the caller frees with the matching `*_free` function. Every fallible call
//! returns an [`SsStatus`]; on failure [`ss_last_error`] describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sparse_steer::bundle::{load_bundle, load_head};
use sparse_steer::eval::classify;
use sparse_steer::sae::load_model;
use sparse_steer::steering::{sae_steer, steering_vector_vs2, SteerMode};
use sparse_steer::{ClassifierHead, EmbeddingBundle, Error, SaeModel, SteeringConfig};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Truncation = 5,
    Shape = 6,
    Degenerate = 7,
    OutOfRange = 8,
    Panic = 99,
}

/// An embedding bundle.
pub struct SsBundle(EmbeddingBundle);

/// A trained sparse autoencoder.
pub struct SsModel(SaeModel);

/// A cosine classifier head.
pub struct SsHead(ClassifierHead);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SsStatus {
    match e {
        Error::Io { .. } => SsStatus::Io,
        Error::Format(_) => SsStatus::Format,
        Error::Truncation { .. } => SsStatus::Truncation,
        Error::Shape { .. } => SsStatus::Shape,
        Error::DegenerateInput(_) | Error::Cancellation => SsStatus::Degenerate,
        _ => SsStatus::InvalidArgument,
    }
}

fn fail(status: SsStatus, msg: impl Into<String>) -> SsStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), SsStatus>) -> SsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(SsStatus::Panic, "internal panic"),
    }
}

fn lib<T>(r: sparse_steer::Result<T>) -> Result<T, SsStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, SsStatus> {
    if path.is_null() {
        return Err(fail(SsStatus::NullPointer, "path is null"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| fail(SsStatus::InvalidArgument, "path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, SsStatus> {
    p.as_ref()
        .ok_or_else(|| fail(SsStatus::NullPointer, "handle is null"))
}

unsafe fn input(x: *const f32, len: usize, want: usize) -> Result<Vec<f64>, SsStatus> {
    if x.is_null() {
        return Err(fail(SsStatus::NullPointer, "input buffer is null"));
    }
    if len != want {
        return Err(fail(
            SsStatus::Shape,
            format!("input has length {len}, expected {want}"),
        ));
    }
    Ok(std::slice::from_raw_parts(x, len)
        .iter()
        .map(|&v| f64::from(v))
        .collect())
}

unsafe fn output(out: *mut f32, len: usize, values: &[f64]) -> Result<(), SsStatus> {
    if out.is_null() {
        return Err(fail(SsStatus::NullPointer, "output buffer is null"));
    }
    if len != values.len() {
        return Err(fail(
            SsStatus::Shape,
            format!("output has length {len}, expected {}", values.len()),
        ));
    }
    let dst = std::slice::from_raw_parts_mut(out, len);
    for (d, v) in dst.iter_mut().zip(values) {
        *d = *v as f32;
    }
    Ok(())
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), SsStatus> {
    if out.is_null() {
        return Err(fail(SsStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failure on this thread, or null. The pointer stays
/// valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn ss_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_bundle_load(path: *const c_char, out: *mut *mut SsBundle) -> SsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let b = lib(load_bundle(path))?;
        store(out, SsBundle(b))
    })
}

/// # Safety
/// `bundle` must come from [`ss_bundle_load`] and not be freed yet. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_bundle_free(bundle: *mut SsBundle) {
    if !bundle.is_null() {
        drop(Box::from_raw(bundle));
    }
}

/// # Safety
/// `bundle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_bundle_rows(bundle: *const SsBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.rows())
}

/// # Safety
/// `bundle` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_bundle_dim(bundle: *const SsBundle) -> usize {
    bundle.as_ref().map_or(0, |b| b.0.dim())
}

/// Copies row `i` into `out`, which must hold exactly `dim` floats.
///
/// # Safety
/// `bundle` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_bundle_row(
    bundle: *const SsBundle,
    i: usize,
    out: *mut f32,
    len: usize,
) -> SsStatus {
    guard(|| {
        let b = &handle(bundle)?.0;
        if i >= b.rows() {
            return Err(fail(
                SsStatus::OutOfRange,
                format!("row {i} out of range for {} rows", b.rows()),
            ));
        }
        output(out, len, &b.row_f64(i))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_model_load(path: *const c_char, out: *mut *mut SsModel) -> SsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let (m, _) = lib(load_model(path))?;
        store(out, SsModel(m))
    })
}

/// # Safety
/// `model` must come from [`ss_model_load`] and not be freed yet. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_model_free(model: *mut SsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_model_dim(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_model_latent_dim(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.latent_dim())
}

/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_model_k(model: *const SsModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.k())
}

/// Top-k reconstruction of `x`.
///
/// # Safety
/// `x` must be valid for `len` reads and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_reconstruct(
    model: *const SsModel,
    x: *const f32,
    len: usize,
    out: *mut f32,
) -> SsStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let x = input(x, len, m.dim())?;
        let (xh, _) = lib(m.reconstruct(&x))?;
        output(out, len, &xh)
    })
}

/// Per-sample steering vector `decode(gamma * c) - decode(c)`.
///
/// # Safety
/// `x` must be valid for `len` reads and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_steering_vector(
    model: *const SsModel,
    x: *const f32,
    len: usize,
    gamma: f64,
    out: *mut f32,
) -> SsStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let x = input(x, len, m.dim())?;
        let v = lib(steering_vector_vs2(m, &x, gamma))?;
        output(out, len, &v.direction)
    })
}

/// Norm-preserving steering of `x` with strength `lambda`.
///
/// # Safety
/// `x` must be valid for `len` reads and `out` for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn ss_steer(
    model: *const SsModel,
    x: *const f32,
    len: usize,
    gamma: f64,
    lambda: f64,
    out: *mut f32,
) -> SsStatus {
    guard(|| {
        let m = &handle(model)?.0;
        let x = input(x, len, m.dim())?;
        let config = SteeringConfig {
            gamma,
            lambda,
            mode: SteerMode::Steering,
            k: None,
        };
        lib(config.validate())?;
        let y = lib(sae_steer(m, &x, &config))?;
        output(out, len, &y)
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn ss_head_load(path: *const c_char, out: *mut *mut SsHead) -> SsStatus {
    guard(|| {
        let path = path_arg(path)?;
        let h = lib(load_head(path))?;
        store(out, SsHead(h))
    })
}

/// # Safety
/// `head` must come from [`ss_head_load`] and not be freed yet. Null is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn ss_head_free(head: *mut SsHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// # Safety
/// `head` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ss_head_num_classes(head: *const SsHead) -> usize {
    head.as_ref().map_or(0, |h| h.0.num_classes())
}

/// Most similar class by cosine; ties go to the lower class id.
///
/// # Safety
/// `x` must be valid for `len` reads; `class_out` and `score_out` must be
/// writable (`score_out` may be null).
#[no_mangle]
pub unsafe extern "C" fn ss_classify(
    head: *const SsHead,
    x: *const f32,
    len: usize,
    class_out: *mut u32,
    score_out: *mut f64,
) -> SsStatus {
    guard(|| {
        let h = &handle(head)?.0;
        let x = input(x, len, h.dim())?;
        if class_out.is_null() {
            return Err(fail(SsStatus::NullPointer, "class_out is null"));
        }
        let ranked = lib(classify(&x, h, 1))?;
        let (c, s) = ranked[0];
        *class_out = c as u32;
        if !score_out.is_null() {
            *score_out = s;
        }
        Ok(())
    })
}
