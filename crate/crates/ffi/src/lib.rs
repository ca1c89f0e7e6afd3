//! C ABI for the safechat engine.
//!
//! Every function returns a [`SafechatStatus`]; on failure
//! [`safechat_last_error`] describes the problem. Handles are opaque and
//! must be released with their `_free` function. Strings returned by
//! accessors are owned by the handle they came from.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use safechat::corpus::{load_corpus, Corpus};
use safechat::evalharness::{assign, mann_whitney, Variant};
use safechat::nlu::{classify, train, IntentModel};
use safechat::paraphrase::{paraphrase_corpus, RuleParaphraser};
use safechat::safety::{guard, verify_chain, Decision, SafetyPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafechatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Corpus = 4,
    Model = 5,
    Policy = 6,
    Audit = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafechatKind {
    Answer = 0,
    Deflect = 1,
    Fallback = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SafechatVariant {
    Experimental = 0,
    Control = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SafechatMannWhitney {
    pub u: f64,
    pub u_a: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Loaded corpus, model and policy.
pub struct SafechatEngine {
    corpus: Corpus,
    model: IntentModel,
    policy: SafetyPolicy,
    corpus_hash: CString,
    turns: u64,
}

/// One guarded decision.
pub struct SafechatResponse {
    kind: SafechatKind,
    text: CString,
    entry_id: Option<CString>,
    source_url: Option<CString>,
    confidence: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(SafechatStatus, String);

fn fail<E: std::fmt::Display>(status: SafechatStatus) -> impl FnOnce(E) -> Failure {
    move |e| Failure(status, e.to_string())
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> SafechatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SafechatStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SafechatStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(SafechatStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(SafechatStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn owned(s: &str) -> CString {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed")
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn safechat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

fn engine_from(corpus: Corpus, model: IntentModel, policy_path: Option<&str>) -> Result<SafechatEngine, Failure> {
    let policy = match policy_path {
        Some(p) => SafetyPolicy::load(p).map_err(fail(SafechatStatus::Policy))?,
        None => SafetyPolicy::builtin(),
    };
    let corpus_hash = owned(model.corpus_hash());
    Ok(SafechatEngine { corpus, model, policy, corpus_hash, turns: 0 })
}

/// Opens a corpus and the model trained on it. `policy_path` may be null for
/// the bundled policy.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings and `out`
/// must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safechat_engine_open(
    corpus_path: *const c_char,
    model_path: *const c_char,
    policy_path: *const c_char,
    out: *mut *mut SafechatEngine,
) -> SafechatStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure(SafechatStatus::NullPointer, "out is null".into()));
        }
        let corpus_path = str_arg(corpus_path, "corpus_path")?;
        let model_path = str_arg(model_path, "model_path")?;
        let policy_path = if policy_path.is_null() { None } else { Some(str_arg(policy_path, "policy_path")?) };
        let corpus = load_corpus(PathBuf::from(corpus_path), "").map_err(fail(SafechatStatus::Corpus))?;
        let model = IntentModel::load(model_path).map_err(fail(SafechatStatus::Model))?;
        if model.corpus_hash() != corpus.digest() {
            return Err(Failure(SafechatStatus::Model, "model was trained on a different corpus".into()));
        }
        *out = Box::into_raw(Box::new(engine_from(corpus, model, policy_path)?));
        Ok(())
    })
}

/// Loads a corpus and trains a model in memory with `k` paraphrases per
/// question.
///
/// # Safety
/// As for [`safechat_engine_open`].
#[no_mangle]
pub unsafe extern "C" fn safechat_engine_train(
    corpus_path: *const c_char,
    k: usize,
    policy_path: *const c_char,
    out: *mut *mut SafechatEngine,
) -> SafechatStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure(SafechatStatus::NullPointer, "out is null".into()));
        }
        if k == 0 {
            return Err(Failure(SafechatStatus::InvalidArgument, "k must be at least 1".into()));
        }
        let corpus_path = str_arg(corpus_path, "corpus_path")?;
        let policy_path = if policy_path.is_null() { None } else { Some(str_arg(policy_path, "policy_path")?) };
        let corpus = load_corpus(PathBuf::from(corpus_path), "").map_err(fail(SafechatStatus::Corpus))?;
        let sets = paraphrase_corpus(&RuleParaphraser::builtin(), &corpus, k).map_err(fail(SafechatStatus::Model))?;
        let model = train(&corpus, &sets).map_err(fail(SafechatStatus::Model))?;
        *out = Box::into_raw(Box::new(engine_from(corpus, model, policy_path)?));
        Ok(())
    })
}

/// # Safety
/// `engine` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn safechat_engine_free(engine: *mut SafechatEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// SHA-256 of the corpus the engine serves, as lowercase hex.
///
/// # Safety
/// `engine` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_engine_corpus_hash(engine: *const SafechatEngine) -> *const c_char {
    match engine.as_ref() {
        Some(e) => e.corpus_hash.as_ptr(),
        None => ptr::null(),
    }
}

/// Classifies and guards one utterance.
///
/// # Safety
/// `engine` must be a live handle, `utterance` a valid NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn safechat_engine_ask(
    engine: *mut SafechatEngine,
    utterance: *const c_char,
    out: *mut *mut SafechatResponse,
) -> SafechatStatus {
    guarded(|| {
        let (Some(engine), false) = (engine.as_mut(), out.is_null()) else {
            return Err(Failure(SafechatStatus::NullPointer, "engine or out is null".into()));
        };
        let utterance = str_arg(utterance, "utterance")?;
        let c = classify(&engine.model, utterance);
        let d = guard(&c, utterance, &engine.policy, &engine.model, &engine.corpus, engine.turns);
        engine.turns += 1;
        let response = match &d {
            Decision::Answer { entry_id, source_url, confidence, .. } => SafechatResponse {
                kind: SafechatKind::Answer,
                text: owned(d.text()),
                entry_id: Some(owned(entry_id)),
                source_url: Some(owned(source_url)),
                confidence: *confidence,
            },
            Decision::Deflect { .. } => SafechatResponse {
                kind: SafechatKind::Deflect,
                text: owned(d.text()),
                entry_id: None,
                source_url: None,
                confidence: f64::NAN,
            },
            Decision::Fallback { top_confidence, .. } => SafechatResponse {
                kind: SafechatKind::Fallback,
                text: owned(d.text()),
                entry_id: None,
                source_url: None,
                confidence: top_confidence.unwrap_or(f64::NAN),
            },
        };
        *out = Box::into_raw(Box::new(response));
        Ok(())
    })
}

/// # Safety
/// `response` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_kind(response: *const SafechatResponse) -> SafechatKind {
    response.as_ref().map_or(SafechatKind::Fallback, |r| r.kind)
}

/// # Safety
/// `response` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_text(response: *const SafechatResponse) -> *const c_char {
    response.as_ref().map_or(ptr::null(), |r| r.text.as_ptr())
}

/// Null unless the response is an answer.
///
/// # Safety
/// `response` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_entry_id(response: *const SafechatResponse) -> *const c_char {
    response.as_ref().and_then(|r| r.entry_id.as_ref()).map_or(ptr::null(), |s| s.as_ptr())
}

/// Null unless the response is an answer.
///
/// # Safety
/// `response` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_source_url(response: *const SafechatResponse) -> *const c_char {
    response.as_ref().and_then(|r| r.source_url.as_ref()).map_or(ptr::null(), |s| s.as_ptr())
}

/// Answer confidence, the best score behind a fallback, or NaN.
///
/// # Safety
/// `response` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_confidence(response: *const SafechatResponse) -> f64 {
    response.as_ref().map_or(f64::NAN, |r| r.confidence)
}

/// # Safety
/// `response` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn safechat_response_free(response: *mut SafechatResponse) {
    if !response.is_null() {
        drop(Box::from_raw(response));
    }
}

/// Verifies an audit log. `first_broken` receives the 1-based line of the
/// first bad record, or 0 when the chain is intact.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; the out pointers must be
/// valid.
#[no_mangle]
pub unsafe extern "C" fn safechat_audit_verify(
    path: *const c_char,
    records: *mut u64,
    first_broken: *mut u64,
) -> SafechatStatus {
    guarded(|| {
        if records.is_null() || first_broken.is_null() {
            return Err(Failure(SafechatStatus::NullPointer, "out pointer is null".into()));
        }
        let report = verify_chain(str_arg(path, "path")?).map_err(fail(SafechatStatus::Audit))?;
        *records = report.records;
        *first_broken = report.first_broken.unwrap_or(0);
        Ok(())
    })
}

/// Two-sided Mann-Whitney U test of `a` against `b`.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn safechat_mann_whitney(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    out: *mut SafechatMannWhitney,
) -> SafechatStatus {
    guarded(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return Err(Failure(SafechatStatus::NullPointer, "null pointer argument".into()));
        }
        let a = std::slice::from_raw_parts(a, na);
        let b = std::slice::from_raw_parts(b, nb);
        let r = mann_whitney(a, b).map_err(fail(SafechatStatus::InvalidArgument))?;
        *out = SafechatMannWhitney { u: r.u, u_a: r.u_a, p_value: r.p_value, exact: r.exact };
        Ok(())
    })
}

/// Deterministic trial arm for a user.
///
/// # Safety
/// `user_id` must be a valid NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn safechat_assign(user_id: *const c_char, seed: u64, out: *mut SafechatVariant) -> SafechatStatus {
    guarded(|| {
        if out.is_null() {
            return Err(Failure(SafechatStatus::NullPointer, "out is null".into()));
        }
        *out = match assign(str_arg(user_id, "user_id")?, seed).variant {
            Variant::Experimental => SafechatVariant::Experimental,
            Variant::Control => SafechatVariant::Control,
        };
        Ok(())
    })
}
