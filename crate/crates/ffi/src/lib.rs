//! C interface to the watermark generator and detectors.
//!
//! Networks are exposed as opaque handles loaded from weight files. Every
//! call returns a [`UpvStatus`]; on failure the message is kept per thread
//! and can be read with [`upv_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use upv::detection::{cyclic_green_labels, key_based_detect, network_detect, DetectorNetwork};
use upv::generator::{GeneratorNetwork, WindowLabeler};
use upv::harness::{load_detector, load_generator};
use upv::{Error, TokenId, WatermarkConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpvStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad argument or input data (out-of-vocabulary token, too short, ...).
    InvalidInput = 2,
    Io = 3,
    /// Weight file with the wrong magic, version, architecture or layout.
    BadWeights = 4,
    Runtime = 5,
    Panic = 6,
}

/// Opaque generator handle.
pub struct UpvGenerator(GeneratorNetwork);

/// Opaque network-detector handle, with the config it was trained under.
pub struct UpvDetector {
    net: DetectorNetwork,
    config: WatermarkConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> UpvStatus {
    match err {
        Error::Io { .. } => UpvStatus::Io,
        Error::BadMagic
        | Error::VersionMismatch { .. }
        | Error::ArchitectureMismatch { .. }
        | Error::MalformedWeights(_)
        | Error::ShapeMismatch { .. } => UpvStatus::BadWeights,
        e if e.is_validation() => UpvStatus::InvalidInput,
        _ => UpvStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), UpvStatus>) -> UpvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UpvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic".into());
            UpvStatus::Panic
        }
    }
}

fn check<T>(r: upv::Result<T>) -> Result<T, UpvStatus> {
    r.map_err(|e| {
        set_error(e.to_string());
        status_of(&e)
    })
}

fn null() -> UpvStatus {
    set_error("null pointer argument".into());
    UpvStatus::NullPointer
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, UpvStatus> {
    if path.is_null() {
        return Err(null());
    }
    CStr::from_ptr(path).to_str().map_err(|_| {
        set_error("path is not valid UTF-8".into());
        UpvStatus::InvalidInput
    })
}

unsafe fn tokens_arg(tokens: *const u32, len: usize) -> Result<Vec<TokenId>, UpvStatus> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if tokens.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(tokens, len).iter().map(|&t| TokenId(t)).collect())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn upv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated) and returns the full message length in bytes,
/// or 0 when there is none.
///
/// # Safety
/// `buf` must be null or point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn upv_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && cap > 0 {
            let n = bytes.len().min(cap - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Loads a generator weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upv_generator_load(path: *const c_char, out: *mut *mut UpvGenerator) -> UpvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = ptr::null_mut();
        let net = check(load_generator(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(UpvGenerator(net)));
        Ok(())
    })
}

/// Releases a generator handle. Null is ignored.
///
/// # Safety
/// `gen` must come from [`upv_generator_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn upv_generator_free(gen: *mut UpvGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Window size of the generator, or 0 for a null handle.
///
/// # Safety
/// `gen` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn upv_generator_window(gen: *const UpvGenerator) -> usize {
    gen.as_ref().map_or(0, |g| g.0.window())
}

/// Vocabulary size of the generator, or 0 for a null handle.
///
/// # Safety
/// `gen` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn upv_generator_vocab(gen: *const UpvGenerator) -> u32 {
    gen.as_ref().map_or(0, |g| g.0.vocab().size())
}

/// Writes one green (1) / red (0) flag per token into `flags`, using
/// wrap-around windows for the first `window - 1` tokens.
///
/// # Safety
/// `tokens` and `flags` must each point to `len` elements.
#[no_mangle]
pub unsafe extern "C" fn upv_generator_label(
    gen: *const UpvGenerator,
    tokens: *const u32,
    len: usize,
    flags: *mut u8,
) -> UpvStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(null)?;
        if flags.is_null() {
            return Err(null());
        }
        let toks = tokens_arg(tokens, len)?;
        let labels = check(cyclic_green_labels(&g.0, &toks))?;
        for (i, l) in labels.into_iter().enumerate() {
            *flags.add(i) = u8::from(l);
        }
        Ok(())
    })
}

/// Key-based detection with the generator's stored config. Writes the z
/// statistic and the verdict (1 watermarked, 0 clean).
///
/// # Safety
/// `tokens` must point to `len` ids; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn upv_detect_key(
    gen: *const UpvGenerator,
    tokens: *const u32,
    len: usize,
    z: *mut f64,
    watermarked: *mut u8,
) -> UpvStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(null)?;
        if z.is_null() || watermarked.is_null() {
            return Err(null());
        }
        let toks = tokens_arg(tokens, len)?;
        let r = check(key_based_detect(&g.0, &toks, g.0.config()))?;
        *z = r.statistic;
        *watermarked = u8::from(r.verdict.is_watermarked());
        Ok(())
    })
}

/// Loads a network-detector weight file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn upv_detector_load(path: *const c_char, out: *mut *mut UpvDetector) -> UpvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        *out = ptr::null_mut();
        let (net, config) = check(load_detector(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(UpvDetector { net, config }));
        Ok(())
    })
}

/// Releases a detector handle. Null is ignored.
///
/// # Safety
/// `det` must come from [`upv_detector_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn upv_detector_free(det: *mut UpvDetector) {
    if !det.is_null() {
        drop(Box::from_raw(det));
    }
}

/// Window size the detector was trained for, or 0 for a null handle.
///
/// # Safety
/// `det` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn upv_detector_window(det: *const UpvDetector) -> usize {
    det.as_ref().map_or(0, |d| d.config.window)
}

/// Network detection. Writes the detector's score in (0, 1) and the verdict
/// (1 when the score is at least 0.5).
///
/// # Safety
/// `tokens` must point to `len` ids; the outputs must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn upv_detect_network(
    det: *const UpvDetector,
    tokens: *const u32,
    len: usize,
    score: *mut f64,
    watermarked: *mut u8,
) -> UpvStatus {
    guard(|| {
        let d = det.as_ref().ok_or_else(null)?;
        if score.is_null() || watermarked.is_null() {
            return Err(null());
        }
        let toks = tokens_arg(tokens, len)?;
        let r = check(network_detect(&d.net, &toks))?;
        *score = r.statistic;
        *watermarked = u8::from(r.verdict.is_watermarked());
        Ok(())
    })
}
