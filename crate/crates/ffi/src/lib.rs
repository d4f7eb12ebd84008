//! C interface to `cpgtts`.
//!
//! Corpora and models cross the boundary as opaque handles created by a
//! `cpg_*_generate`/`cpg_*_load`/`cpg_train` call and released with the
//! matching `cpg_*_free`. Every fallible function returns a [`CpgStatus`];
//! on failure the message is kept per thread and read with
//! [`cpg_last_error_message`]. Panics are caught at the boundary and reported
//! as [`CpgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use cpgtts::autodiff::tensor::Tensor;
use cpgtts::config::RunConfig;
use cpgtts::data::{generate_toy_corpus, language, Corpus, Split, Utterance};
use cpgtts::eval::compare::variant_config;
use cpgtts::eval::{cer, evaluate_model, synthesize};
use cpgtts::model::checkpoint::Checkpoint;
use cpgtts::model::{Model, Variant};
use cpgtts::training::Trainer;
use cpgtts::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Contract = 4,
    Lookup = 5,
    Io = 6,
    Parse = 7,
    Numeric = 8,
    /// The caller's buffer is too small; the required size was written.
    BufferTooSmall = 9,
    Panic = 10,
}

/// A generated or loaded corpus.
pub struct CpgCorpus {
    corpus: Corpus,
}

/// A trained or loaded model.
pub struct CpgModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> CpgStatus {
    match e {
        Error::Config(_) => CpgStatus::Config,
        Error::Contract(_) | Error::Shape { .. } | Error::UninitializedStats => CpgStatus::Contract,
        Error::Lookup(_) => CpgStatus::Lookup,
        Error::File { .. } | Error::Io(_) => CpgStatus::Io,
        Error::Parse { .. } => CpgStatus::Parse,
        Error::Domain { .. } | Error::NonFinite(_) => CpgStatus::Numeric,
    }
}

enum Fail {
    Status(CpgStatus, String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type Outcome<T> = std::result::Result<T, Fail>;

/// Runs `f`, translating errors and panics into a status and the last-error message.
fn guard(f: impl FnOnce() -> Outcome<()>) -> CpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CpgStatus::Ok,
        Ok(Err(Fail::Status(status, msg))) => {
            set_last_error(msg);
            status
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("panic: {msg}"));
            CpgStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(CpgStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail::Status(CpgStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Outcome<&'a str> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn config_arg(ptr: *const c_char) -> Outcome<RunConfig> {
    if ptr.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_toml(str_arg(ptr, "config")?)?)
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Outcome<&'a T> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(ptr: *mut T, what: &str) -> Outcome<&'a mut T> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cpg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Bytes needed for the last error message of this thread, terminator
/// included; 0 when no call has failed.
#[no_mangle]
pub extern "C" fn cpg_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(0, |m| m.as_bytes_with_nul().len()))
}

/// Copies the last error message of this thread into `buf`.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn cpg_last_error_message(buf: *mut c_char, len: usize) -> CpgStatus {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(msg) = slot.as_ref() else {
            if !buf.is_null() && len > 0 {
                *buf = 0;
            }
            return CpgStatus::Ok;
        };
        let bytes = msg.as_bytes_with_nul();
        if buf.is_null() {
            return CpgStatus::NullPointer;
        }
        if len < bytes.len() {
            return CpgStatus::BufferTooSmall;
        }
        std::ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        CpgStatus::Ok
    })
}

/// Generates the toy corpus described by the `[corpus]` section of
/// `config_toml` (NULL for the defaults).
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpg_corpus_generate(
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut CpgCorpus,
) -> CpgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = config_arg(config_toml)?;
        let corpus = generate_toy_corpus(&cfg.corpus, seed)?;
        *out = Box::into_raw(Box::new(CpgCorpus { corpus }));
        Ok(())
    })
}

/// # Safety
/// `dir` is a NUL-terminated path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpg_corpus_load(dir: *const c_char, out: *mut *mut CpgCorpus) -> CpgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let corpus = Corpus::load(&dir)?;
        *out = Box::into_raw(Box::new(CpgCorpus { corpus }));
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; `dir` is a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn cpg_corpus_save(corpus: *const CpgCorpus, dir: *const c_char) -> CpgStatus {
    guard(|| {
        let corpus = handle(corpus, "corpus")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        corpus.corpus.write(&dir)?;
        Ok(())
    })
}

/// # Safety
/// `corpus` is a live handle; the outputs are writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn cpg_corpus_info(
    corpus: *const CpgCorpus,
    languages: *mut usize,
    speakers: *mut usize,
    utterances: *mut usize,
) -> CpgStatus {
    guard(|| {
        let c = &handle(corpus, "corpus")?.corpus;
        if let Some(p) = languages.as_mut() {
            *p = c.num_languages();
        }
        if let Some(p) = speakers.as_mut() {
            *p = c.speakers;
        }
        if let Some(p) = utterances.as_mut() {
            *p = c.utterances.len();
        }
        Ok(())
    })
}

/// # Safety
/// `corpus` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpg_corpus_free(corpus: *mut CpgCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Trains the `[model]` variant on the corpus's training split with the
/// `[train]` settings of `config_toml` (NULL for the desk defaults).
///
/// # Safety
/// `corpus` is a live handle; `config_toml` is NULL or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpg_train(
    corpus: *const CpgCorpus,
    config_toml: *const c_char,
    seed: u64,
    out: *mut *mut CpgModel,
) -> CpgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let corpus = &handle(corpus, "corpus")?.corpus;
        let cfg = config_arg(config_toml)?;
        let variant = cfg.model.variant;
        if variant == Variant::Sgl {
            return Err(invalid("train the single-language model through the command line"));
        }
        let mcfg = variant_config(&cfg.model, variant, corpus.num_languages(), corpus.speakers)?;
        let mut tc = cfg.train.clone().for_variant(variant);
        tc.seed = seed;
        let model = Model::new(mcfg, seed)?;
        let mut trainer = Trainer::new(model, tc, corpus.split(Split::Train), corpus.split(Split::Val))?;
        let outcome = trainer.run(None)?;
        *out = Box::into_raw(Box::new(CpgModel { model: outcome.model }));
        Ok(())
    })
}

/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpg_model_load(path: *const c_char, out: *mut *mut CpgModel) -> CpgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let model = Checkpoint::load(&path)?.model;
        *out = Box::into_raw(Box::new(CpgModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn cpg_model_save(model: *const CpgModel, path: *const c_char) -> CpgStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        Checkpoint::new(model.model.clone()).save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cpg_model_free(model: *mut CpgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Synthesizes `text` (letters `a`..`z`) in `language` with `speaker`.
///
/// Writes `n_frames` and `frame_dim` first; when `frames` is NULL or
/// `capacity < n_frames * frame_dim` nothing else is written and
/// `CPG_STATUS_BUFFER_TOO_SMALL` is returned, so a first call with a NULL
/// buffer sizes the second. `stopped` (optional) reports whether the stop
/// head fired before the step limit.
///
/// # Safety
/// Handles are live; `text` is NUL-terminated; `frames` holds `capacity`
/// doubles; the size outputs are writable; `stopped` is writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn cpg_synthesize(
    model: *const CpgModel,
    corpus: *const CpgCorpus,
    text: *const c_char,
    language: usize,
    speaker: usize,
    frames: *mut f64,
    capacity: usize,
    n_frames: *mut usize,
    frame_dim: *mut usize,
    stopped: *mut bool,
) -> CpgStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let corpus = &handle(corpus, "corpus")?.corpus;
        let text = str_arg(text, "text")?;
        let n_out = out_ptr(n_frames, "n_frames")?;
        let dim_out = out_ptr(frame_dim, "frame_dim")?;
        if text.is_empty() || language::parse_text(text).is_none() {
            return Err(invalid(format!("text `{text}` must be non-empty lowercase letters")));
        }
        if language >= model.config.languages {
            return Err(invalid(format!("language {language} out of range")));
        }
        if speaker >= model.config.speakers {
            return Err(invalid(format!("speaker {speaker} out of range")));
        }
        let r = corpus.bank.frames_per_phoneme;
        let utt = Utterance {
            id: "ffi".into(),
            language,
            speaker,
            text: text.to_string(),
            frames: Tensor::zeros(&[r, corpus.bank.dim()]),
            split: Split::Test,
        };
        let inf = synthesize(model, &[&utt], r)?.remove(0);
        let (n, d) = (inf.frames.shape()[0], inf.frames.shape()[1]);
        *n_out = n;
        *dim_out = d;
        if let Some(p) = stopped.as_mut() {
            *p = inf.stopped;
        }
        if frames.is_null() || capacity < n * d {
            return Err(Fail::Status(
                CpgStatus::BufferTooSmall,
                format!("{} doubles needed, {capacity} given", n * d),
            ));
        }
        std::ptr::copy_nonoverlapping(inf.frames.data().as_ptr(), frames, n * d);
        Ok(())
    })
}

/// Mean character error rate of `model` over the corpus's test split.
///
/// # Safety
/// Handles are live; `mean_cer` is writable; `skips` is writable or NULL.
#[no_mangle]
pub unsafe extern "C" fn cpg_evaluate(
    model: *const CpgModel,
    corpus: *const CpgCorpus,
    mean_cer: *mut f64,
    skips: *mut usize,
) -> CpgStatus {
    guard(|| {
        let model = &handle(model, "model")?.model;
        let corpus = &handle(corpus, "corpus")?.corpus;
        let out = out_ptr(mean_cer, "mean_cer")?;
        let scores = evaluate_model(model, corpus, &corpus.split(Split::Test))?;
        *out = scores.iter().map(|s| s.cer).sum::<f64>() / scores.len() as f64;
        if let Some(p) = skips.as_mut() {
            *p = scores.iter().filter(|s| s.skipped).count();
        }
        Ok(())
    })
}

/// Edit distance between two symbol sequences divided by the reference length.
///
/// # Safety
/// `reference` holds `ref_len` values, `hypothesis` holds `hyp_len` values
/// (either may be NULL when its length is 0), and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cpg_cer(
    reference: *const u32,
    ref_len: usize,
    hypothesis: *const u32,
    hyp_len: usize,
    out: *mut f64,
) -> CpgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let slice = |p: *const u32, n: usize, what: &str| -> Outcome<&[u32]> {
            match (p.is_null(), n) {
                (_, 0) => Ok(&[]),
                (true, _) => Err(null(what)),
                (false, n) => Ok(std::slice::from_raw_parts(p, n)),
            }
        };
        let r = slice(reference, ref_len, "reference")?;
        let h = slice(hypothesis, hyp_len, "hypothesis")?;
        *out = cer(r, h)?;
        Ok(())
    })
}
