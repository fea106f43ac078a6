//! C ABI over `dde-core` checkpoints.
//!
//! Models are loaded into opaque handles and evaluated on row-major `double` buffers.
//! Every fallible function returns a [`DdeStatus`]; on failure a message is available from
//! [`dde_last_error_message`] on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dde_core::checkpoint::Checkpoint;
use dde_core::dde::DdeModel;
use dde_core::diffengine::Mat;
use dde_core::generator::GeneratorModel;
use dde_core::samplers;
use dde_core::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DdeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Numeric = 5,
    WrongKind = 6,
    Panic = 7,
}

/// A trained energy network.
pub struct DdeModelHandle {
    model: DdeModel,
}

/// A trained generator.
pub struct DdeGeneratorHandle {
    generator: GeneratorModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn status_of(err: &Error) -> DdeStatus {
    match err {
        Error::Io { .. } => DdeStatus::Io,
        Error::NonFinite { .. } | Error::Numeric(_) | Error::Estimation(_) => DdeStatus::Numeric,
        Error::Contract(_) => DdeStatus::InvalidArgument,
        _ => DdeStatus::Config,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (DdeStatus, String)>) -> DdeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DdeStatus::Panic
        }
    }
}

fn core_err(e: Error) -> (DdeStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (DdeStatus, String) {
    (DdeStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, (DdeStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (DdeStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(Path::new(s))
}

unsafe fn load_checkpoint(path: *const c_char) -> Result<Checkpoint, (DdeStatus, String)> {
    let path = path_arg(path)?;
    Checkpoint::load(path).map_err(core_err)
}

unsafe fn input_rows(x: *const f64, n: usize, dim: usize) -> Result<Mat, (DdeStatus, String)> {
    if x.is_null() {
        return Err(null("input buffer"));
    }
    if n == 0 {
        return Err((DdeStatus::InvalidArgument, "row count must be at least 1".into()));
    }
    let vals = std::slice::from_raw_parts(x, n * dim).to_vec();
    Mat::from_vec(n, dim, vals).map_err(core_err)
}

unsafe fn write_out(out: *mut f64, values: &[f64]) -> Result<(), (DdeStatus, String)> {
    if out.is_null() {
        return Err(null("output buffer"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn wrong_kind(e: Error) -> (DdeStatus, String) {
    (DdeStatus::WrongKind, e.to_string())
}

/// Message for the most recent failure on this thread, or an empty string. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dde_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dde_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load an energy checkpoint. On success `*out` owns a handle to free with [`dde_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dde_model_load(path: *const c_char, out: *mut *mut DdeModelHandle) -> DdeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path)?;
        let model = ck.to_dde().map_err(wrong_kind)?;
        *out = Box::into_raw(Box::new(DdeModelHandle { model }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`dde_model_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dde_model_free(handle: *mut DdeModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Input dimension, or 0 for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_model_dim(handle: *const DdeModelHandle) -> usize {
    handle.as_ref().map_or(0, |h| h.model.dim())
}

/// Noise level the model was trained at, or NaN for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_model_sigma_eta(handle: *const DdeModelHandle) -> f64 {
    handle.as_ref().map_or(f64::NAN, |h| h.model.sigma_eta())
}

/// Unnormalised log-density `s(x)` for `n` row-major points; writes `n` values.
///
/// # Safety
/// `x` must hold `n·dim` doubles and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn dde_model_log_density(
    handle: *const DdeModelHandle,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> DdeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let rows = input_rows(x, n, h.model.dim())?;
        let vals = h.model.log_density_batch(&rows).map_err(core_err)?;
        write_out(out, &vals)
    })
}

/// Score `∇s(x)`; writes `n·dim` values.
///
/// # Safety
/// `x` must hold `n·dim` doubles and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn dde_model_score(
    handle: *const DdeModelHandle,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> DdeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let rows = input_rows(x, n, h.model.dim())?;
        let g = h.model.score_batch(&rows).map_err(core_err)?;
        write_out(out, g.as_slice())
    })
}

/// Denoised points `x + σ²∇s(x)`; writes `n·dim` values.
///
/// # Safety
/// `x` must hold `n·dim` doubles and `out` room for as many.
#[no_mangle]
pub unsafe extern "C" fn dde_model_denoise(
    handle: *const DdeModelHandle,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> DdeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let rows = input_rows(x, n, h.model.dim())?;
        let d = h.model.denoise_batch(&rows).map_err(core_err)?;
        write_out(out, d.as_slice())
    })
}

/// Load a generator checkpoint. Free the handle with [`dde_generator_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_load(path: *const c_char, out: *mut *mut DdeGeneratorHandle) -> DdeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path)?;
        let generator = ck.to_generator().map_err(wrong_kind)?;
        *out = Box::into_raw(Box::new(DdeGeneratorHandle { generator }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`dde_generator_load`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_free(handle: *mut DdeGeneratorHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Output dimension, or 0 for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_dim(handle: *const DdeGeneratorHandle) -> usize {
    handle.as_ref().map_or(0, |h| h.generator.out_dim())
}

/// Latent dimension, or 0 for a NULL handle.
///
/// # Safety
/// `handle` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_latent_dim(handle: *const DdeGeneratorHandle) -> usize {
    handle.as_ref().map_or(0, |h| h.generator.latent_dim())
}

/// `n` samples drawn as `samplers::sample_direct(generator, n, seed)`; writes `n·dim` values.
///
/// # Safety
/// `out` must have room for `n·dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_sample(
    handle: *const DdeGeneratorHandle,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> DdeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let s = samplers::sample_direct(&h.generator, n, seed).map_err(core_err)?;
        write_out(out, s.points.as_slice())
    })
}

/// `g(z)` for `n` row-major latent vectors; writes `n·dim` values.
///
/// # Safety
/// `z` must hold `n·latent_dim` doubles and `out` room for `n·dim`.
#[no_mangle]
pub unsafe extern "C" fn dde_generator_forward(
    handle: *const DdeGeneratorHandle,
    z: *const f64,
    n: usize,
    out: *mut f64,
) -> DdeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let rows = input_rows(z, n, h.generator.latent_dim())?;
        let x = h.generator.forward(&rows).map_err(core_err)?;
        write_out(out, x.as_slice())
    })
}
