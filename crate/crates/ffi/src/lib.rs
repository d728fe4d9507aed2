//! C ABI over the `editlab` experiment pipeline.
//!
//! Objects are opaque handles created by `*_new`/`*_prepare` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`EditlabStatus`]; on failure [`editlab_last_error`] describes the cause.
//! Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use editlab::evalprof::{edit_and_evaluate, EditMetrics, EditPlan};
use editlab::harness::{prepare, save_state, Checkpoint, ExperimentConfig, Prepared};
use editlab::metatrain::Trainer;
use editlab::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Precondition = 3,
    Numeric = 4,
    Io = 5,
    Internal = 6,
    Panic = 7,
}

/// Editing metrics in one style.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EditlabMetrics {
    pub efficacy: f64,
    pub generalization: f64,
    pub specificity: f64,
    pub n_evaluated: usize,
}

impl From<EditMetrics> for EditlabMetrics {
    fn from(m: EditMetrics) -> Self {
        EditlabMetrics {
            efficacy: m.efficacy,
            generalization: m.generalization,
            specificity: m.specificity,
            n_evaluated: m.n_evaluated,
        }
    }
}

/// Experiment configuration.
pub struct EditlabConfig(ExperimentConfig);

/// Corpus and pretrained base model for one seed.
pub struct EditlabSession(Prepared);

/// Hypernetwork meta-trainer bound to a session's training split.
pub struct EditlabTrainer(Trainer);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EditlabStatus {
    match e {
        Error::Config(_) | Error::Input(_) => EditlabStatus::InvalidArgument,
        Error::Precondition(_) | Error::Capacity(_) => EditlabStatus::Precondition,
        Error::Numeric(_) | Error::Measurement(_) => EditlabStatus::Numeric,
        Error::Io { .. } | Error::Format { .. } | Error::Version { .. } => EditlabStatus::Io,
        Error::Shape(_) | Error::Contract(_) => EditlabStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> EditlabStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            EditlabStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            EditlabStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            EditlabStatus::InvalidArgument
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            EditlabStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn emit<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn editlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message length
/// in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn editlab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a config from a preset name (`paper`, `desk` or `trend`).
///
/// # Safety
/// `preset` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn editlab_config_new(preset: *const c_char, out: *mut *mut EditlabConfig) -> EditlabStatus {
    guard(|| {
        let preset = text(preset, "preset")?.parse()?;
        emit(out, EditlabConfig(ExperimentConfig::preset(preset)))
    })
}

/// Sets a dotted config key, e.g. `trainer.eta` to `0.1`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_config_set(
    config: *mut EditlabConfig,
    key: *const c_char,
    value: *const c_char,
) -> EditlabStatus {
    guard(|| {
        let c = obj_mut(config, "config")?;
        c.0.set(text(key, "key")?, text(value, "value")?)?;
        Ok(())
    })
}

/// Writes the 64-character hex config hash plus a terminator into `buf`.
///
/// # Safety
/// `config` must be valid and `buf` must hold at least 65 bytes.
#[no_mangle]
pub unsafe extern "C" fn editlab_config_hash(config: *const EditlabConfig, buf: *mut c_char, len: usize) -> EditlabStatus {
    guard(|| {
        let h = obj(config, "config")?.0.hash();
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        if len <= h.len() {
            return Err(Error::Input(format!("hash buffer needs {} bytes", h.len() + 1)).into());
        }
        ptr::copy_nonoverlapping(h.as_ptr().cast(), buf, h.len());
        *buf.add(h.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle from [`editlab_config_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn editlab_config_free(config: *mut EditlabConfig) {
    release(config);
}

/// Generates the corpus and pretrains the base model for `seed`.
/// Fails with `EDITLAB_STATUS_PRECONDITION` when the unedited model does not
/// reach the configured specificity floor.
///
/// # Safety
/// `config` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_session_prepare(
    config: *const EditlabConfig,
    seed: u64,
    out: *mut *mut EditlabSession,
) -> EditlabStatus {
    guard(|| {
        let c = obj(config, "config")?;
        let prep = prepare(&c.0.for_seed(seed))?;
        emit(out, EditlabSession(prep))
    })
}

/// Metrics of the unedited model on the held-out split.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_session_base_metrics(
    session: *const EditlabSession,
    argmax: *mut EditlabMetrics,
    prob: *mut EditlabMetrics,
) -> EditlabStatus {
    guard(|| {
        let s = &obj(session, "session")?.0;
        let a = editlab::evalprof::eval_argmax(&s.model, s.test_split())?;
        let p = editlab::evalprof::eval_prob_compare(&s.model, s.test_split())?;
        *obj_mut(argmax, "argmax")? = a.into();
        *obj_mut(prob, "prob")? = p.into();
        Ok(())
    })
}

/// Writes the session's corpus as JSON lines.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_session_save_corpus(session: *const EditlabSession, path: *const c_char) -> EditlabStatus {
    guard(|| {
        let s = &obj(session, "session")?.0;
        s.corpus.save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `session` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn editlab_session_free(session: *mut EditlabSession) {
    release(session);
}

/// Creates a meta-trainer with the session config's trainer settings.
///
/// # Safety
/// `session` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_new(session: *const EditlabSession, out: *mut *mut EditlabTrainer) -> EditlabStatus {
    guard(|| {
        let s = &obj(session, "session")?.0;
        let t = Trainer::new(s.config.trainer.clone(), &s.model, s.train_split())?;
        emit(out, EditlabTrainer(t))
    })
}

/// Runs `iterations` more meta-training iterations.
///
/// # Safety
/// `trainer` must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_run(trainer: *mut EditlabTrainer, iterations: usize) -> EditlabStatus {
    guard(|| {
        obj_mut(trainer, "trainer")?.0.run(iterations)?;
        Ok(())
    })
}

/// Iterations completed so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_iterations(trainer: *const EditlabTrainer) -> usize {
    trainer.as_ref().map_or(0, |t| t.0.iteration())
}

/// Edits the session's held-out split with the trained hypernetworks and
/// scores it in both metric styles.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_evaluate(
    trainer: *const EditlabTrainer,
    session: *const EditlabSession,
    argmax: *mut EditlabMetrics,
    prob: *mut EditlabMetrics,
) -> EditlabStatus {
    guard(|| {
        let t = &obj(trainer, "trainer")?.0;
        let s = &obj(session, "session")?.0;
        let c = &s.config;
        let plan = EditPlan {
            batch_size: c.eval.batch_size,
            steps: t.config().steps,
            aggregation: t.config().aggregation,
            protocol: c.eval.protocol,
        };
        let e = edit_and_evaluate(&s.model, t.editors().editors(), s.test_split(), &plan)?;
        *obj_mut(argmax, "argmax")? = e.argmax.into();
        *obj_mut(prob, "prob")? = e.prob.into();
        Ok(())
    })
}

/// Saves base model, config and trainer state as a checkpoint.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_save(
    trainer: *const EditlabTrainer,
    session: *const EditlabSession,
    path: *const c_char,
) -> EditlabStatus {
    guard(|| {
        let t = &obj(trainer, "trainer")?.0;
        let s = &obj(session, "session")?.0;
        let ck = Checkpoint {
            config: s.config.clone(),
            model: s.model.clone(),
            trainer: Some(t.state()),
        };
        save_state(Path::new(text(path, "path")?), &ck)?;
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn editlab_trainer_free(trainer: *mut EditlabTrainer) {
    release(trainer);
}
