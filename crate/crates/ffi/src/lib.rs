//! C interface to a trained run directory.
//!
//! Every fallible function returns an [`HgsrStatus`]; on failure the message
//! is kept per thread and read back with [`hgsr_last_error`]. Strings handed
//! out by the library must be released with [`hgsr_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hgsr::artifact::{self, ArtifactError, LoadedModel};
use hgsr::corpus::{self, CorpusError, SyntheticConfig};
use hgsr::hetgraph;
use hgsr::model::Instance;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HgsrStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidInput = 4,
    Model = 5,
    Panic = 6,
}

/// A loaded model; opaque to C callers.
pub struct HgsrModel {
    inner: LoadedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(HgsrStatus, String);

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let status = match e {
            CorpusError::Io(_) => HgsrStatus::Io,
            _ => HgsrStatus::InvalidInput,
        };
        Failure(status, e.to_string())
    }
}

impl From<ArtifactError> for Failure {
    fn from(e: ArtifactError) -> Self {
        let status = match e {
            ArtifactError::Missing(_) | ArtifactError::Io { .. } => HgsrStatus::Io,
            _ => HgsrStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HgsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HgsrStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            HgsrStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(HgsrStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(HgsrStatus::InvalidUtf8, format!("{what}: {e}")))
}

fn hand_out(s: String, out: *mut *mut c_char) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(HgsrStatus::Model, e.to_string()))?;
    // SAFETY: callers check `out` for null before producing output.
    unsafe { *out = c.into_raw() };
    Ok(())
}

fn model_ref<'a>(model: *const HgsrModel) -> Result<&'a HgsrModel, Failure> {
    // SAFETY: non-null handles come from `hgsr_model_load` and stay valid until freed.
    unsafe { model.as_ref() }.ok_or_else(|| Failure(HgsrStatus::NullArgument, "model is null".into()))
}

fn instance(model: &HgsrModel, sentence_json: &str) -> Result<(Instance, corpus::AnnotatedSentence), Failure> {
    let opts = model.inner.config.graph_options();
    let sentence = corpus::parse_unlabeled(sentence_json.trim(), 1, &opts.noun_tags)?;
    Ok((Instance::new(sentence.clone(), &model.inner.vocab, &opts), sentence))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hgsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread; empty if none.
/// Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hgsr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads the selected model of a run directory into `*out`.
///
/// # Safety
/// `model_dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn hgsr_model_load(model_dir: *const c_char, out: *mut *mut HgsrModel) -> HgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(HgsrStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let dir = text(model_dir, "model_dir")?;
        let inner = artifact::load_selected(Path::new(dir))?;
        *out = Box::into_raw(Box::new(HgsrModel { inner }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from `hgsr_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hgsr_model_free(model: *mut HgsrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model kind of a loaded handle: `p`, `t` or `v`, as a static string.
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn hgsr_model_kind(model: *const HgsrModel) -> *const c_char {
    match model.as_ref().map(|m| m.inner.model.kind.short()) {
        Some("p") => c"p".as_ptr(),
        Some("t") => c"t".as_ptr(),
        Some(_) => c"v".as_ptr(),
        None => ptr::null(),
    }
}

/// Predicts one sentence given as a JSON record (gold fields optional) and
/// writes the prediction JSON to `*out`.
///
/// # Safety
/// Pointers must be valid; `*out` must be freed with `hgsr_string_free`.
#[no_mangle]
pub unsafe extern "C" fn hgsr_predict_json(
    model: *const HgsrModel,
    sentence_json: *const c_char,
    out: *mut *mut c_char,
) -> HgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(HgsrStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let m = model_ref(model)?;
        let (inst, _) = instance(m, text(sentence_json, "sentence_json")?)?;
        let p = m
            .inner
            .model
            .predict(&inst)
            .map_err(|e| Failure(HgsrStatus::Model, e.to_string()))?;
        hand_out(serde_json::to_string(&p).expect("prediction serializes"), out)
    })
}

/// Builds the sentence graph under the model's settings and writes DOT text to `*out`.
///
/// # Safety
/// Pointers must be valid; `*out` must be freed with `hgsr_string_free`.
#[no_mangle]
pub unsafe extern "C" fn hgsr_graph_dot(
    model: *const HgsrModel,
    sentence_json: *const c_char,
    out: *mut *mut c_char,
) -> HgsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(HgsrStatus::NullArgument, "out is null".into()));
        }
        *out = ptr::null_mut();
        let m = model_ref(model)?;
        let (inst, sentence) = instance(m, text(sentence_json, "sentence_json")?)?;
        hand_out(hetgraph::to_dot(&inst.graph, &sentence), out)
    })
}

/// Writes a synthetic JSON Lines corpus of `n` sentences to `path`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hgsr_generate_corpus(path: *const c_char, n: usize, seed: u64, noise_rate: f64) -> HgsrStatus {
    guard(|| {
        let path = text(path, "path")?;
        let data = corpus::generate_synthetic(&SyntheticConfig {
            n_sentences: n,
            seed,
            noise_rate,
        })?;
        let file = std::fs::File::create(path).map_err(|e| Failure(HgsrStatus::Io, format!("{path}: {e}")))?;
        corpus::write_corpus(std::io::BufWriter::new(file), &data)
            .map_err(|e| Failure(HgsrStatus::Io, format!("{path}: {e}")))
    })
}

/// Releases a string returned through an `out` parameter; null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hgsr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
