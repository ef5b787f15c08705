//! C ABI for kprompt.
//!
//! Every fallible call returns a [`KpStatus`]; on failure the message is
//! available from [`kp_last_error`] on the same thread until the next call.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. No call unwinds across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kprompt::compile::{read_records, CompiledRecord};
use kprompt::eval::{ndcg_hr, rank_records};
use kprompt::generate::BeamConfig;
use kprompt::maskgen::MaskMatrix;
use kprompt::model::{load_checkpoint, ModelState};
use kprompt::pipeline::artifacts;
use kprompt::prompts::Vocabulary;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfRange = 3,
    Io = 4,
    Model = 5,
    Panic = 6,
}

/// Visibility matrix of one compiled input.
pub struct KpMask {
    inner: MaskMatrix,
}

/// A trained run directory: model, vocabulary and compiled test split.
pub struct KpRun {
    state: ModelState<f32>,
    vocab: Vocabulary,
    records: Vec<CompiledRecord>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Runs `f`, recording any error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), (KpStatus, String)>) -> KpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KpStatus::Ok,
        Ok(Err((status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            KpStatus::Panic
        }
    }
}

fn null(what: &str) -> (KpStatus, String) {
    (KpStatus::NullPointer, format!("`{what}` is null"))
}

/// # Safety
/// `p` is null or a valid nul-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (KpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (KpStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next kprompt call on the same thread.
#[no_mangle]
pub extern "C" fn kp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// HR@k and NDCG@k for a target at 1-based `rank`; `rank` 0 means the
/// target was not ranked.
///
/// # Safety
/// `hr` and `ndcg` point to writable doubles.
#[no_mangle]
pub unsafe extern "C" fn kp_ndcg_hr(
    rank: usize,
    k: usize,
    hr: *mut f64,
    ndcg: *mut f64,
) -> KpStatus {
    guard(|| {
        if hr.is_null() || ndcg.is_null() {
            return Err(null("hr/ndcg"));
        }
        let r = (rank > 0).then_some(rank);
        let (h, n) = ndcg_hr(r, k).map_err(|e| (KpStatus::InvalidArgument, e.to_string()))?;
        *hr = h;
        *ndcg = n;
        Ok(())
    })
}

/// Decodes a mask in its serialized base64 form.
///
/// # Safety
/// `b64` is a nul-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kp_mask_from_base64(
    b64: *const c_char,
    out: *mut *mut KpMask,
) -> KpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let s = str_arg(b64, "b64")?;
        let inner = MaskMatrix::try_from(s.to_owned())
            .map_err(|e| (KpStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(KpMask { inner }));
        Ok(())
    })
}

/// Side length of the mask, or 0 for a null handle.
///
/// # Safety
/// `mask` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kp_mask_size(mask: *const KpMask) -> usize {
    mask.as_ref().map_or(0, |m| m.inner.size())
}

/// Whether token `i` may attend to token `j`.
///
/// # Safety
/// `mask` is a live handle; `visible` points to a writable bool.
#[no_mangle]
pub unsafe extern "C" fn kp_mask_visible(
    mask: *const KpMask,
    i: usize,
    j: usize,
    visible: *mut bool,
) -> KpStatus {
    guard(|| {
        let m = mask.as_ref().ok_or_else(|| null("mask"))?;
        if visible.is_null() {
            return Err(null("visible"));
        }
        let n = m.inner.size();
        if i >= n || j >= n {
            return Err((
                KpStatus::OutOfRange,
                format!("({i}, {j}) outside a {n}x{n} mask"),
            ));
        }
        *visible = m.inner.visible(i, j);
        Ok(())
    })
}

/// # Safety
/// `mask` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kp_mask_free(mask: *mut KpMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Opens a trained run directory.
///
/// # Safety
/// `dir` is a nul-terminated path; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kp_run_open(dir: *const c_char, out: *mut *mut KpRun) -> KpStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let dir = Path::new(str_arg(dir, "dir")?);
        let io = |e: &dyn std::fmt::Display| (KpStatus::Io, e.to_string());
        let vocab = Vocabulary::load(&dir.join(artifacts::VOCAB)).map_err(|e| io(&e))?;
        let records = read_records(&dir.join(artifacts::TEST)).map_err(|e| io(&e))?;
        let state: ModelState<f32> = load_checkpoint(&dir.join(artifacts::CHECKPOINT))
            .map_err(|e| (KpStatus::Model, e.to_string()))?;
        if state.config.vocab_size != vocab.len() {
            return Err((
                KpStatus::Model,
                format!(
                    "checkpoint vocabulary {} != {}",
                    state.config.vocab_size,
                    vocab.len()
                ),
            ));
        }
        *out = Box::into_raw(Box::new(KpRun {
            state,
            vocab,
            records,
        }));
        Ok(())
    })
}

/// Number of test records, or 0 for a null handle.
///
/// # Safety
/// `run` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kp_run_num_records(run: *const KpRun) -> usize {
    run.as_ref().map_or(0, |r| r.records.len())
}

/// Mask of test record `index`; free it with [`kp_mask_free`].
///
/// # Safety
/// `run` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kp_run_mask(
    run: *const KpRun,
    index: usize,
    out: *mut *mut KpMask,
) -> KpStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = record(r, index)?;
        *out = Box::into_raw(Box::new(KpMask {
            inner: rec.mask.clone(),
        }));
        Ok(())
    })
}

fn record(r: &KpRun, index: usize) -> Result<&CompiledRecord, (KpStatus, String)> {
    r.records.get(index).ok_or_else(|| {
        (
            KpStatus::OutOfRange,
            format!("record {index} of {}", r.records.len()),
        )
    })
}

/// Top-`k` items for test record `index` as a JSON object
/// `{"user", "target", "topk": [[item, score], ...]}`. Free the string
/// with [`kp_string_free`].
///
/// # Safety
/// `run` is a live handle; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn kp_run_recommend(
    run: *const KpRun,
    index: usize,
    k: usize,
    use_mask: bool,
    out: *mut *mut c_char,
) -> KpStatus {
    guard(|| {
        let r = run.as_ref().ok_or_else(|| null("run"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let rec = record(r, index)?;
        let beam = BeamConfig {
            beam_width: k,
            k,
            ..BeamConfig::default()
        };
        let lists = rank_records(
            &r.state,
            std::slice::from_ref(rec),
            &r.vocab,
            &beam,
            use_mask,
        )
        .map_err(|e| (KpStatus::InvalidArgument, e.to_string()))?;
        let json = serde_json::to_string(&lists[0]).expect("serializable");
        *out = CString::new(json).expect("JSON has no nul").into_raw();
        Ok(())
    })
}

/// # Safety
/// `run` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kp_run_free(run: *mut KpRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// # Safety
/// `s` is null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn kp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
