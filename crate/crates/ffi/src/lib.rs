//! C interface to trained `lexdmv` models.
//!
//! Models are loaded into an opaque [`LexdmvModel`] handle. Every fallible
//! function returns a [`LexdmvStatus`]; on failure the message is available
//! from [`lexdmv_last_error_message`] on the same thread. The header
//! `include/lexdmv.h` is generated from this file at build time.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use lexdmv::chart::inside;
use lexdmv::persist::{load_model, ModelFile};
use lexdmv::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LexdmvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    Version = 5,
    UnknownTag = 6,
    InvalidArgument = 7,
    Internal = 8,
}

/// A loaded model. Only ever handled through pointers.
pub struct LexdmvModel {
    model: ModelFile,
    punct: HashSet<String>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: LexdmvStatus, msg: impl Into<String>) -> LexdmvStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> LexdmvStatus {
    match e {
        Error::Io { .. } => LexdmvStatus::Io,
        Error::Parse { .. } | Error::Format(_) => LexdmvStatus::Format,
        Error::Version { .. } => LexdmvStatus::Version,
        Error::UnknownTag(_) => LexdmvStatus::UnknownTag,
        _ => LexdmvStatus::InvalidArgument,
    }
}

fn guard(f: impl FnOnce() -> LexdmvStatus) -> LexdmvStatus {
    catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| fail(LexdmvStatus::Internal, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, LexdmvStatus> {
    if p.is_null() {
        return Err(fail(LexdmvStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            LexdmvStatus::InvalidUtf8,
            format!("{what} is not valid UTF-8"),
        )
    })
}

unsafe fn str_array<'a>(
    p: *const *const c_char,
    n: usize,
    what: &str,
) -> Result<Vec<&'a str>, LexdmvStatus> {
    if p.is_null() {
        return Err(fail(LexdmvStatus::NullPointer, format!("{what} is null")));
    }
    (0..n).map(|i| str_arg(*p.add(i), what)).collect()
}

/// Loads a model file. On success `*out` owns a handle that must be
/// released with [`lexdmv_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lexdmv_model_load(
    path: *const c_char,
    out: *mut *mut LexdmvModel,
) -> LexdmvStatus {
    guard(|| {
        if out.is_null() {
            return fail(LexdmvStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_model(path) {
            Ok(model) => {
                let punct = model.punct_set();
                *out = Box::into_raw(Box::new(LexdmvModel { model, punct }));
                LexdmvStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`lexdmv_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lexdmv_model_free(model: *mut LexdmvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of tokens in the model's lexicon, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lexdmv_model_vocab_size(model: *const LexdmvModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.lexicon.len())
}

/// Parses `n` tokens given as parallel word and tag arrays, writing 1-based
/// heads (0 = root) into `heads_out`, which must hold `n` entries.
/// Punctuation tokens are attached to the root word.
///
/// # Safety
/// `words` and `tags` must point to `n` NUL-terminated strings and
/// `heads_out` to `n` writable values.
#[no_mangle]
pub unsafe extern "C" fn lexdmv_parse(
    model: *const LexdmvModel,
    words: *const *const c_char,
    tags: *const *const c_char,
    n: usize,
    heads_out: *mut usize,
) -> LexdmvStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(LexdmvStatus::NullPointer, "model is null");
        };
        if heads_out.is_null() {
            return fail(LexdmvStatus::NullPointer, "heads_out is null");
        }
        if n == 0 {
            return fail(LexdmvStatus::InvalidArgument, "empty sentence");
        }
        let (words, tags) = match (str_array(words, n, "words"), str_array(tags, n, "tags")) {
            (Ok(w), Ok(t)) => (w, t),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match m.model.parse_tokens(&words, &tags, &m.punct) {
            Ok(heads) => {
                std::slice::from_raw_parts_mut(heads_out, n).copy_from_slice(&heads);
                LexdmvStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Log-probability of a sentence summed over all projective trees. No
/// punctuation is removed.
///
/// # Safety
/// As for [`lexdmv_parse`]; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lexdmv_sentence_log_prob(
    model: *const LexdmvModel,
    words: *const *const c_char,
    tags: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> LexdmvStatus {
    guard(|| {
        let Some(m) = model.as_ref() else {
            return fail(LexdmvStatus::NullPointer, "model is null");
        };
        if out.is_null() {
            return fail(LexdmvStatus::NullPointer, "out is null");
        }
        if n == 0 {
            return fail(LexdmvStatus::InvalidArgument, "empty sentence");
        }
        let (words, tags) = match (str_array(words, n, "words"), str_array(tags, n, "tags")) {
            (Ok(w), Ok(t)) => (w, t),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        match m.model.encode_tokens(&words, &tags) {
            Ok(s) => {
                *out = inside(&s, &m.model.params).log_prob;
                LexdmvStatus::Ok
            }
            Err(e) => fail(status_of(&e), e.to_string()),
        }
    })
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lexdmv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lexdmv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
