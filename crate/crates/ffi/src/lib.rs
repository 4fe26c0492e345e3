//! C ABI over `diffinterp`.
//!
//! Every fallible call returns a [`DiStatus`]; on failure the message is
//! kept per thread and read back with [`di_last_error`]. Handles are opaque
//! and must be released with their matching `_free` function. Panics never
//! cross the boundary, they surface as `DI_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use diffinterp::backend::{backend_by_name, Backend, Image, ToyBackend, ToyConfig};
use diffinterp::error::Error;
use diffinterp::metrics::{fid, ppl, FeatureSet};
use diffinterp::tree::{frame_schedule, run_scheme, GenerationConfig, PairConditioning};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Backend = 4,
    Io = 5,
    Numeric = 6,
    Panic = 7,
}

impl From<&Error> for DiStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::Json(_) => DiStatus::InvalidConfig,
            Error::BackendUnavailable(_) | Error::Unsupported(_) => DiStatus::Backend,
            Error::Io { .. } | Error::Image(_) | Error::CorruptCache(_) => DiStatus::Io,
            Error::ZeroNorm | Error::NonFinite(_) | Error::SingularTransform(_) => DiStatus::Numeric,
            _ => DiStatus::InvalidArgument,
        }
    }
}

struct Failure(DiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(DiStatus::from(&e), e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DiStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DiStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            DiStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DiStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DiStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

unsafe fn string<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn optional_string<'a>(ptr: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if ptr.is_null() {
        Ok(None)
    } else {
        string(ptr, what).map(Some)
    }
}

unsafe fn features(ptr: *const f64, rows: usize, dim: usize, what: &str) -> Result<FeatureSet, Failure> {
    if dim == 0 {
        return Err(invalid(format!("{what}: feature dimension is zero")));
    }
    let len = rows.checked_mul(dim).ok_or_else(|| invalid(format!("{what}: size overflows")))?;
    let flat = slice(ptr, len, what)?;
    Ok(FeatureSet::new(flat.chunks(dim).map(<[f64]>::to_vec).collect(), "ffi")?)
}

/// Message for the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn di_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn di_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Spherical interpolation of two `len`-vectors into `out` (`len` doubles).
///
/// # Safety
/// `a`, `b` and `out` must each point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn di_slerp(a: *const f64, b: *const f64, len: usize, u: f64, out: *mut f64) -> DiStatus {
    guard(|| {
        let a = slice(a, len, "a")?;
        let b = slice(b, len, "b")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = diffinterp::diffusion::slerp(a, b, u)?;
        std::slice::from_raw_parts_mut(out, len).copy_from_slice(&v);
        Ok(())
    })
}

/// Timestep for frame `i` of a sequence with `n` intervals.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn di_frame_schedule(i: usize, n: usize, t_min: u32, t_max: u32, out: *mut u32) -> DiStatus {
    guard(|| {
        *self::out(out, "out")? = frame_schedule(i, n, t_min, t_max)?;
        Ok(())
    })
}

/// Fréchet distance between two row-major feature matrices of width `dim`.
///
/// # Safety
/// `a` must hold `rows_a * dim` doubles, `b` must hold `rows_b * dim`.
#[no_mangle]
pub unsafe extern "C" fn di_fid(
    a: *const f64,
    rows_a: usize,
    b: *const f64,
    rows_b: usize,
    dim: usize,
    out: *mut f64,
) -> DiStatus {
    guard(|| {
        let fa = features(a, rows_a, dim, "a")?;
        let fb = features(b, rows_b, dim, "b")?;
        *self::out(out, "out")? = fid(&fa, &fb)?;
        Ok(())
    })
}

/// Total path length through `rows` consecutive feature vectors.
///
/// # Safety
/// `seq` must hold `rows * dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn di_ppl(seq: *const f64, rows: usize, dim: usize, out: *mut f64) -> DiStatus {
    guard(|| {
        let f = features(seq, rows, dim, "seq")?;
        *self::out(out, "out")? = ppl(&f)?;
        Ok(())
    })
}

pub struct DiBackend {
    inner: Arc<dyn Backend>,
}

/// Opens a backend by name (`"toy"` or `"process"`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn di_backend_open(name: *const c_char, out: *mut *mut DiBackend) -> DiStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let inner = backend_by_name(string(name, "name")?)?;
        *slot = Box::into_raw(Box::new(DiBackend { inner }));
        Ok(())
    })
}

/// Toy backend with a custom working size and prior width.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn di_toy_backend_new(
    width: u32,
    height: u32,
    prior_std: f64,
    out: *mut *mut DiBackend,
) -> DiStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        if width == 0 || height == 0 {
            return Err(invalid("toy backend size must be positive"));
        }
        if !(prior_std.is_finite() && prior_std >= 0.0) {
            return Err(invalid(format!("prior_std must be finite and non-negative, got {prior_std}")));
        }
        let config = ToyConfig {
            width,
            height,
            prior_std,
            ..ToyConfig::default()
        };
        *slot = Box::into_raw(Box::new(DiBackend {
            inner: Arc::new(ToyBackend::new(config)),
        }));
        Ok(())
    })
}

/// # Safety
/// `backend` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn di_backend_free(backend: *mut DiBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

pub struct DiImage {
    inner: Image,
}

fn boxed_image(inner: Image) -> *mut DiImage {
    Box::into_raw(Box::new(DiImage { inner }))
}

/// Image from interleaved RGB floats, `width * height * 3` of them.
///
/// # Safety
/// `rgb` must hold `width * height * 3` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn di_image_new(width: u32, height: u32, rgb: *const f32, out: *mut *mut DiImage) -> DiStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let len = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| invalid("image size overflows"))?;
        let data = slice(rgb, len, "rgb")?.to_vec();
        *slot = boxed_image(Image::from_raw(width, height, data)?);
        Ok(())
    })
}

/// Loads any format the `image` crate decodes.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn di_image_load(path: *const c_char, out: *mut *mut DiImage) -> DiStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        *slot = boxed_image(Image::load(Path::new(string(path, "path")?))?);
        Ok(())
    })
}

/// # Safety
/// `image` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn di_image_save_png(image: *const DiImage, path: *const c_char) -> DiStatus {
    guard(|| {
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        image.inner.save_png(Path::new(string(path, "path")?))?;
        Ok(())
    })
}

/// Writes the size to `width` and `height`, and a borrowed pointer to the
/// `width * height * 3` floats to `data`. The pointer lives as long as the
/// image.
///
/// # Safety
/// `image` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn di_image_data(
    image: *const DiImage,
    width: *mut u32,
    height: *mut u32,
    data: *mut *const f32,
) -> DiStatus {
    guard(|| {
        let image = image.as_ref().ok_or_else(|| null("image"))?;
        *out(width, "width")? = image.inner.width();
        *out(height, "height")? = image.inner.height();
        *out(data, "data")? = image.inner.raw().as_ptr();
        Ok(())
    })
}

/// # Safety
/// `image` must come from this library and not be used afterwards. Frames
/// borrowed from a sequence must not be passed here.
#[no_mangle]
pub unsafe extern "C" fn di_image_free(image: *mut DiImage) {
    if !image.is_null() {
        drop(Box::from_raw(image));
    }
}

pub struct DiSequence {
    frames: Vec<DiImage>,
}

/// Runs one interpolation scheme between `a` and `b`.
///
/// `config_json` holds generation settings as a JSON object; missing keys
/// take their defaults and null means all defaults. `prompt` and
/// `negative_prompt` may be null for empty prompts.
///
/// # Safety
/// Handles must be live, strings NUL-terminated or null, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn di_run(
    backend: *const DiBackend,
    a: *const DiImage,
    b: *const DiImage,
    config_json: *const c_char,
    prompt: *const c_char,
    negative_prompt: *const c_char,
    out: *mut *mut DiSequence,
) -> DiStatus {
    guard(|| {
        let slot = self::out(out, "out")?;
        let backend = &backend.as_ref().ok_or_else(|| null("backend"))?.inner;
        let a = &a.as_ref().ok_or_else(|| null("a"))?.inner;
        let b = &b.as_ref().ok_or_else(|| null("b"))?.inner;
        let config: GenerationConfig = match optional_string(config_json, "config_json")? {
            Some(json) => serde_json::from_str(json).map_err(Error::from)?,
            None => GenerationConfig::default(),
        };
        config.validate()?;
        let prompt = optional_string(prompt, "prompt")?.unwrap_or("");
        let negative = optional_string(negative_prompt, "negative_prompt")?.unwrap_or("");
        let cond = PairConditioning::from_prompts(backend.as_ref(), prompt, negative, config.guidance_scale)?;
        let seq = run_scheme(a, b, &config, backend.as_ref(), &cond)?;
        let frames = seq.frames.into_iter().map(|f| DiImage { inner: f.image }).collect();
        *slot = Box::into_raw(Box::new(DiSequence { frames }));
        Ok(())
    })
}

/// Number of frames, endpoints included. Zero for a null handle.
///
/// # Safety
/// `seq` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn di_sequence_len(seq: *const DiSequence) -> usize {
    seq.as_ref().map_or(0, |s| s.frames.len())
}

/// Borrowed frame `index`, or null when out of range. Owned by the
/// sequence; do not free.
///
/// # Safety
/// `seq` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn di_sequence_frame(seq: *const DiSequence, index: usize) -> *const DiImage {
    seq.as_ref()
        .and_then(|s| s.frames.get(index))
        .map_or(std::ptr::null(), |f| f as *const DiImage)
}

/// # Safety
/// `seq` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn di_sequence_free(seq: *mut DiSequence) {
    if !seq.is_null() {
        drop(Box::from_raw(seq));
    }
}
