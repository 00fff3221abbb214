//! C ABI over the fvlab engine.
//!
//! Models and FV stores are opaque handles created by `*_load`/`*_open` and
//! released by the matching `*_free`. Every fallible call returns an
//! [`FvlabStatus`]; the message of the last failure on the calling thread is
//! available from [`fvlab_last_error`].
//!
//! Output buffers follow one convention: the caller passes a pointer and a
//! capacity, the callee always writes the required length to `*out_len`, and
//! returns `FVLAB_BUFFER_TOO_SMALL` without writing data when it does not fit.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fvlab::battery::TemplateId;
use fvlab::fv::FvStore;
use fvlab::model::{load_checkpoint, ForwardRequest, InterventionPlan, ModelHandle, PositionMode, TapPositions};
use fvlab::{stats, Error};

/// Result codes. Zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FvlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Parameter = 4,
    Range = 5,
    Length = 6,
    Format = 7,
    Integrity = 8,
    Capability = 9,
    Truncation = 10,
    Io = 11,
    Store = 12,
    Degenerate = 13,
    Other = 14,
    Panic = 15,
}

impl From<&Error> for FvlabStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Parameter(_) => Self::Parameter,
            Error::Range { .. } => Self::Range,
            Error::Length { .. } => Self::Length,
            Error::Format(_) => Self::Format,
            Error::Integrity(_) => Self::Integrity,
            Error::Capability(_) => Self::Capability,
            Error::Truncation { .. } => Self::Truncation,
            Error::Io { .. } => Self::Io,
            Error::Store(_) => Self::Store,
            Error::Degenerate(_) => Self::Degenerate,
            _ => Self::Other,
        }
    }
}

/// Opaque model handle.
pub struct FvlabModel {
    inner: ModelHandle,
}

/// Opaque function-vector store handle.
pub struct FvlabStore {
    inner: FvStore,
}

/// Additive steering `h += alpha * vector` at the output of block `layer`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct FvlabSteer {
    pub layer: usize,
    /// `d_model` floats.
    pub vector: *const f32,
    pub vector_len: usize,
    pub alpha: f32,
    /// Nonzero steers only the final position.
    pub final_position_only: u8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(FvlabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

type Out = Result<(), Fail>;

fn fail(status: FvlabStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Out) -> FvlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FvlabStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            FvlabStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(FvlabStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(FvlabStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(FvlabStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(FvlabStatus::NullPointer, format!("{what} is null")))
}

unsafe fn write_out<T: Copy>(data: &[T], out: *mut T, cap: usize, out_len: *mut usize) -> Out {
    if out_len.is_null() {
        return Err(fail(FvlabStatus::NullPointer, "out_len is null"));
    }
    *out_len = data.len();
    if data.len() > cap {
        return Err(fail(
            FvlabStatus::BufferTooSmall,
            format!("need {} elements, buffer holds {cap}", data.len()),
        ));
    }
    if !data.is_empty() {
        if out.is_null() {
            return Err(fail(FvlabStatus::NullPointer, "output buffer is null"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    }
    Ok(())
}

unsafe fn write_scalar<T>(p: *mut T, v: T, what: &str) -> Out {
    if p.is_null() {
        return Err(fail(FvlabStatus::NullPointer, format!("{what} is null")));
    }
    *p = v;
    Ok(())
}

unsafe fn plan_arg(steer: *const FvlabSteer) -> Result<Option<InterventionPlan>, Fail> {
    let Some(s) = steer.as_ref() else {
        return Ok(None);
    };
    let v = slice(s.vector, s.vector_len, "steer.vector")?;
    let mut plan = InterventionPlan::new(s.layer, v.to_vec(), s.alpha);
    if s.final_position_only != 0 {
        plan.positions = PositionMode::FinalPositionOnly;
    }
    Ok(Some(plan))
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fvlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fvlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads `path` (an XFVC checkpoint) and the `tokenizer.json` beside it.
#[no_mangle]
pub unsafe extern "C" fn fvlab_model_load(path: *const c_char, out: *mut *mut FvlabModel) -> FvlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FvlabStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = load_checkpoint(Path::new(path))?;
        *out = Box::into_raw(Box::new(FvlabModel { inner }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn fvlab_model_free(model: *mut FvlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Dimensions of a loaded model. Any output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn fvlab_model_dims(
    model: *const FvlabModel,
    n_layers: *mut usize,
    d_model: *mut usize,
    vocab_size: *mut usize,
    max_context: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let a = &handle(model, "model")?.inner.arch;
        for (p, v) in [
            (n_layers, a.n_layers),
            (d_model, a.d_model),
            (vocab_size, a.vocab_size),
            (max_context, a.max_context),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fvlab_encode(
    model: *const FvlabModel,
    text: *const u8,
    text_len: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ids = m.encode(slice(text, text_len, "text")?);
        write_out(&ids, out, cap, out_len)
    })
}

#[no_mangle]
pub unsafe extern "C" fn fvlab_decode(
    model: *const FvlabModel,
    ids: *const u32,
    n_ids: usize,
    out: *mut u8,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let ids = slice(ids, n_ids, "ids")?;
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= m.arch.vocab_size) {
            return Err(fail(FvlabStatus::Range, format!("token id {bad} outside vocabulary")));
        }
        write_out(&m.decode(ids), out, cap, out_len)
    })
}

/// Next-token logits at the final position (`vocab_size` floats), with
/// optional steering (`steer` may be null).
#[no_mangle]
pub unsafe extern "C" fn fvlab_forward(
    model: *const FvlabModel,
    ids: *const u32,
    n_ids: usize,
    steer: *const FvlabSteer,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let plan = plan_arg(steer)?;
        let rec = m.forward(&ForwardRequest {
            tokens: slice(ids, n_ids, "ids")?,
            plan: plan.as_ref(),
            ..Default::default()
        })?;
        write_out(&rec.final_logits, out, cap, out_len)
    })
}

/// Residual stream after block `layer` at the final position (`d_model`
/// floats).
#[no_mangle]
pub unsafe extern "C" fn fvlab_residual(
    model: *const FvlabModel,
    ids: *const u32,
    n_ids: usize,
    layer: usize,
    steer: *const FvlabSteer,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let tokens = slice(ids, n_ids, "ids")?;
        let plan = plan_arg(steer)?;
        let rec = m.forward(&ForwardRequest {
            tokens,
            tap_layers: [layer].into_iter().collect(),
            tap_positions: TapPositions::Final,
            plan: plan.as_ref(),
            patch: None,
        })?;
        let h = rec
            .tap(layer, tokens.len().saturating_sub(1))
            .ok_or_else(|| fail(FvlabStatus::Parameter, "empty token sequence"))?;
        write_out(h, out, cap, out_len)
    })
}

/// Logit-lens logits for a residual vector (`d_model` floats in).
#[no_mangle]
pub unsafe extern "C" fn fvlab_lens_logits(
    model: *const FvlabModel,
    h: *const f32,
    h_len: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let h = slice(h, h_len, "h")?;
        if h.len() != m.arch.d_model {
            return Err(fail(
                FvlabStatus::Parameter,
                format!("residual has length {}, d_model is {}", h.len(), m.arch.d_model),
            ));
        }
        write_out(&m.lens_logits(h), out, cap, out_len)
    })
}

/// Greedy decoding of up to `max_new` tokens after `ids`. On
/// `FVLAB_TRUNCATION` the tokens produced before the context limit are
/// still written.
#[no_mangle]
pub unsafe extern "C" fn fvlab_generate(
    model: *const FvlabModel,
    ids: *const u32,
    n_ids: usize,
    max_new: usize,
    steer: *const FvlabSteer,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let plan = plan_arg(steer)?;
        let prompt = slice(ids, n_ids, "ids")?;
        // A step runs while the sequence fits, so this many tokens can be
        // produced before the context limit stops generation.
        let room = (m.arch.max_context + 1).saturating_sub(prompt.len());
        if max_new == 0 || room == 0 {
            return Err(m.generate_tokens(prompt, max_new, plan.as_ref()).unwrap_err().into());
        }
        let toks = m.generate_tokens(prompt, max_new.min(room), plan.as_ref())?;
        write_out(&toks, out, cap, out_len)?;
        if max_new > room && toks.len() == room {
            return Err(fail(FvlabStatus::Truncation, "generation reached the context limit"));
        }
        Ok(())
    })
}

/// Opens an FV store file.
#[no_mangle]
pub unsafe extern "C" fn fvlab_store_open(path: *const c_char, out: *mut *mut FvlabStore) -> FvlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(FvlabStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let inner = FvStore::read(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(FvlabStore { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn fvlab_store_free(store: *mut FvlabStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Number of stored vectors and their dimension. Either pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn fvlab_store_info(store: *const FvlabStore, len: *mut usize, d_model: *mut usize) -> FvlabStatus {
    guard(|| {
        let s = &handle(store, "store")?.inner;
        if !len.is_null() {
            *len = s.len();
        }
        if !d_model.is_null() {
            *d_model = s.d_model();
        }
        Ok(())
    })
}

/// Copies the FV for (`task`, template `T<template>`, `layer`).
#[no_mangle]
pub unsafe extern "C" fn fvlab_store_get(
    store: *const FvlabStore,
    task: *const c_char,
    template: u8,
    layer: usize,
    out: *mut f32,
    cap: usize,
    out_len: *mut usize,
) -> FvlabStatus {
    guard(|| {
        let s = &handle(store, "store")?.inner;
        let fv = s.get(str_arg(task, "task")?, TemplateId::new(template)?, layer)?;
        write_out(&fv.vector, out, cap, out_len)
    })
}

/// Pearson correlation with its two-sided p-value.
#[no_mangle]
pub unsafe extern "C" fn fvlab_pearson(xs: *const f64, ys: *const f64, n: usize, r: *mut f64, p: *mut f64) -> FvlabStatus {
    guard(|| {
        let c = stats::pearson(slice(xs, n, "xs")?, slice(ys, n, "ys")?)?;
        write_scalar(r, c.r, "r")?;
        write_scalar(p, c.p, "p")
    })
}

/// Welch two-sample t-test, two-sided.
#[no_mangle]
pub unsafe extern "C" fn fvlab_welch(
    a: *const f64,
    n_a: usize,
    b: *const f64,
    n_b: usize,
    t: *mut f64,
    p: *mut f64,
) -> FvlabStatus {
    guard(|| {
        let w = stats::welch(slice(a, n_a, "a")?, slice(b, n_b, "b")?)?;
        write_scalar(t, w.t, "t")?;
        write_scalar(p, w.p, "p")
    })
}
