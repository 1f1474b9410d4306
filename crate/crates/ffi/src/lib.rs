//! C interface to the denoiser.
//!
//! Every function returns an [`HsanetStatus`]; on failure a message is kept
//! per thread and can be read with [`hsanet_last_error`]. Models are opaque
//! handles created by [`hsanet_model_new`] or [`hsanet_model_load`] and
//! released with [`hsanet_model_free`]. Images are `f64`, row-major
//! `[n, h, w]`, normalized to `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hsanet::checkpoint::Checkpoint;
use hsanet::data::Modality;
use hsanet::eval::Metrics;
use hsanet::params::ParamStore;
use hsanet::train::poly_lr;
use hsanet::{Error, HsaNet, ModelConfig, Tensor};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsanetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Format = 5,
    Numerical = 6,
    Panic = 7,
}

/// Network architecture presets for [`hsanet_model_new`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsanetPreset {
    Default = 0,
    Tiny = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HsanetModality {
    Ct = 0,
    Pet = 1,
}

/// Image-quality metrics on `[0, 1]` data.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HsanetMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    /// RMSE in display units (HU for CT, SUV for PET).
    pub rmse_display: f64,
}

/// Opaque network plus parameters.
pub struct HsanetModel {
    net: HsaNet,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HsanetStatus {
    match e {
        Error::InvalidArgument(_) | Error::DegenerateInput(_) => HsanetStatus::InvalidArgument,
        Error::Config { .. } => HsanetStatus::Config,
        Error::Io(_) | Error::Ingestion { .. } | Error::Csv(_) => HsanetStatus::Io,
        Error::Format(_) | Error::Json(_) => HsanetStatus::Format,
        Error::Numerical { .. } => HsanetStatus::Numerical,
    }
}

/// Runs `f`, converting errors and panics into a status and a message.
fn guard(f: impl FnOnce() -> Result<(), (HsanetStatus, String)>) -> HsanetStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HsanetStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            HsanetStatus::Panic
        }
    }
}

fn lib<T>(r: hsanet::Result<T>) -> Result<T, (HsanetStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (HsanetStatus, String) {
    (HsanetStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (HsanetStatus, String) {
    (HsanetStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (HsanetStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

fn image_len(n: usize, h: usize, w: usize) -> Result<usize, (HsanetStatus, String)> {
    if n == 0 || h == 0 || w == 0 {
        return Err(invalid(format!("empty image shape {n}x{h}x{w}")));
    }
    n.checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| invalid("image shape overflows"))
}

/// Message for the last failed call on this thread, or null after a
/// successful call. Valid until the next call into the library.
#[no_mangle]
pub extern "C" fn hsanet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hsanet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a freshly initialized network. The output convolution starts at
/// zero, so a new model returns its input unchanged.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn hsanet_model_new(preset: HsanetPreset, seed: u64, out: *mut *mut HsanetModel) -> HsanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let base = match preset {
            HsanetPreset::Default => ModelConfig::default(),
            HsanetPreset::Tiny => ModelConfig::tiny(),
        };
        let (net, store) = lib(HsaNet::build(&ModelConfig { seed, ..base }))?;
        *out = Box::into_raw(Box::new(HsanetModel { net, store }));
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hsanet_model_load(path: *const c_char, out: *mut *mut HsanetModel) -> HsanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = path_arg(path, "path")?;
        let (net, store) = lib(Checkpoint::load(path).and_then(|c| c.restore()))?;
        *out = Box::into_raw(Box::new(HsanetModel { net, store }));
        Ok(())
    })
}

/// Writes the model parameters as a checkpoint without optimizer state.
///
/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hsanet_model_save(model: *const HsanetModel, path: *const c_char) -> HsanetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = path_arg(path, "path")?;
        lib(Checkpoint::from_store(&m.net.cfg, &m.store).save(path))
    })
}

/// Releases a handle. Null is accepted and ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hsanet_model_free(model: *mut HsanetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hsanet_model_param_count(model: *const HsanetModel, out: *mut usize) -> HsanetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.store.param_count();
        Ok(())
    })
}

/// Denoises `n` single-channel `h x w` images. Any size is accepted; the
/// network pads internally and crops back.
///
/// # Safety
/// `input` and `output` must each point to `n * h * w` doubles; they may
/// alias.
#[no_mangle]
pub unsafe extern "C" fn hsanet_denoise(
    model: *const HsanetModel,
    input: *const f64,
    n: usize,
    h: usize,
    w: usize,
    output: *mut f64,
) -> HsanetStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let len = image_len(n, h, w)?;
        let x = std::slice::from_raw_parts(input, len).to_vec();
        let x = lib(Tensor::new(&[n, 1, h, w], x))?;
        let y = lib(m.net.denoise(&m.store, &x))?;
        if !y.is_finite() {
            return Err((HsanetStatus::Numerical, "network output is not finite".into()));
        }
        std::slice::from_raw_parts_mut(output, len).copy_from_slice(y.data());
        Ok(())
    })
}

/// PSNR, SSIM and RMSE of `pred` against `target`, averaged over the `n`
/// images for SSIM and pooled for PSNR and RMSE.
///
/// # Safety
/// `pred` and `target` must each point to `n * h * w` doubles; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hsanet_metrics(
    pred: *const f64,
    target: *const f64,
    n: usize,
    h: usize,
    w: usize,
    modality: HsanetModality,
    out: *mut HsanetMetrics,
) -> HsanetStatus {
    guard(|| {
        if pred.is_null() || target.is_null() {
            return Err(null(if pred.is_null() { "pred" } else { "target" }));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let len = image_len(n, h, w)?;
        let p = lib(Tensor::new(&[n, h, w], std::slice::from_raw_parts(pred, len).to_vec()))?;
        let t = lib(Tensor::new(&[n, h, w], std::slice::from_raw_parts(target, len).to_vec()))?;
        let modality = match modality {
            HsanetModality::Ct => Modality::Ct,
            HsanetModality::Pet => Modality::Pet,
        };
        let m = lib(Metrics::compute(&p, &t, modality))?;
        *out = HsanetMetrics {
            psnr: m.psnr,
            ssim: m.ssim,
            rmse: m.rmse,
            rmse_display: m.rmse_display,
        };
        Ok(())
    })
}

/// Learning rate at step `n` of `total` under the polynomial schedule.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hsanet_poly_lr(base: f64, n: u64, total: u64, out: *mut f64) -> HsanetStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lib(poly_lr(base, n, total))?;
        Ok(())
    })
}
