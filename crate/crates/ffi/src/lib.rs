//! C ABI over the `partlab` core: text metrics and checkpoint decoding.
//!
//! Every fallible function returns a [`PartlabStatus`]; on failure the
//! message is available from [`partlab_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use partlab::cli::checkpoint;
use partlab::metrics::{bleu_corpus, cer, wer, BleuTokenizer};
use partlab::model::SlmModel;
use partlab::numerics::Tensor;
use partlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    CorruptCheckpoint = 4,
    Io = 5,
    UndefinedReference = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Other = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartlabBleuTokenizer {
    Char = 0,
    Word13a = 1,
}

/// Opaque model handle.
pub struct PartlabModel {
    inner: SlmModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> PartlabStatus {
    match err {
        Error::CorruptCheckpoint { .. } => PartlabStatus::CorruptCheckpoint,
        Error::Io { .. } => PartlabStatus::Io,
        Error::UndefinedReference => PartlabStatus::UndefinedReference,
        Error::Config(_)
        | Error::Validation { .. }
        | Error::Dimension { .. }
        | Error::Length { .. }
        | Error::Index { .. }
        | Error::Pairing { .. } => PartlabStatus::InvalidArgument,
        _ => PartlabStatus::Other,
    }
}

struct Fail(PartlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PartlabStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PartlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PartlabStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(PartlabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(PartlabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn out_arg<T>(p: *mut T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(PartlabStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn partlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn partlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Word error rate of one pair.
///
/// # Safety
/// `reference` and `hypothesis` must be NUL-terminated strings; `out` must
/// be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn partlab_wer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> PartlabStatus {
    guard(|| {
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hypothesis, "hypothesis")?;
        out_arg(out, "out")?;
        *out = wer(r, h)?;
        Ok(())
    })
}

/// Character error rate of one pair.
///
/// # Safety
/// As for [`partlab_wer`].
#[no_mangle]
pub unsafe extern "C" fn partlab_cer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> PartlabStatus {
    guard(|| {
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hypothesis, "hypothesis")?;
        out_arg(out, "out")?;
        *out = cer(r, h)?;
        Ok(())
    })
}

/// Corpus BLEU (0-100) over `n` reference/hypothesis pairs.
///
/// # Safety
/// `refs` and `hyps` must point to `n` NUL-terminated strings each; `out`
/// must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn partlab_bleu(
    refs: *const *const c_char,
    hyps: *const *const c_char,
    n: usize,
    tokenizer: PartlabBleuTokenizer,
    out: *mut f64,
) -> PartlabStatus {
    guard(|| {
        if n > 0 && (refs.is_null() || hyps.is_null()) {
            return Err(Fail(PartlabStatus::NullPointer, "string array is null".into()));
        }
        out_arg(out, "out")?;
        let mut r = Vec::with_capacity(n);
        let mut h = Vec::with_capacity(n);
        for i in 0..n {
            r.push(str_arg(*refs.add(i), "reference")?);
            h.push(str_arg(*hyps.add(i), "hypothesis")?);
        }
        let tok = match tokenizer {
            PartlabBleuTokenizer::Char => BleuTokenizer::Char,
            PartlabBleuTokenizer::Word13a => BleuTokenizer::Word13a,
        };
        *out = bleu_corpus(&r, &h, tok)?;
        Ok(())
    })
}

/// Loads a checkpoint. On success `*out` owns a handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn partlab_model_load(path: *const c_char, out: *mut *mut PartlabModel) -> PartlabStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        out_arg(out, "out")?;
        *out = ptr::null_mut();
        let (inner, _) = checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(PartlabModel { inner }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`partlab_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn partlab_model_free(model: *mut PartlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature width expected by [`partlab_model_decode`]; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn partlab_model_feature_dim(model: *const PartlabModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.config.d_mel)
}

/// Greedy decoding of `frames` x feature_dim row-major features.
/// Writes at most `capacity` tokens and the full count to `*out_len`;
/// returns `BufferTooSmall` when the count exceeds `capacity`.
///
/// # Safety
/// `model` must be a live handle, `features` must hold
/// `frames * feature_dim` floats and `tokens` must hold `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn partlab_model_decode(
    model: *const PartlabModel,
    features: *const f32,
    frames: usize,
    instruction: usize,
    max_len: usize,
    tokens: *mut u32,
    capacity: usize,
    out_len: *mut usize,
) -> PartlabStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| Fail(PartlabStatus::NullPointer, "model is null".into()))?;
        if features.is_null() || (capacity > 0 && tokens.is_null()) {
            return Err(Fail(PartlabStatus::NullPointer, "buffer is null".into()));
        }
        out_arg(out_len, "out_len")?;
        let d = m.inner.config.d_mel;
        let data = std::slice::from_raw_parts(features, frames * d).to_vec();
        let x = Tensor::new(vec![frames, d], data)?;
        let decoded = m.inner.greedy_decode(&x, instruction, max_len)?;
        *out_len = decoded.tokens.len();
        for (i, &t) in decoded.tokens.iter().take(capacity).enumerate() {
            *tokens.add(i) = t as u32;
        }
        if decoded.tokens.len() > capacity {
            return Err(Fail(
                PartlabStatus::BufferTooSmall,
                format!("{} tokens do not fit in {capacity}", decoded.tokens.len()),
            ));
        }
        Ok(())
    })
}
