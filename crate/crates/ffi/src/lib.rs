//! C ABI over the reward model and step parser.
//!
//! Every fallible function returns a [`PrmStatus`]; on failure the message
//! is available from [`prm_last_error_message`] on the same thread. Strings
//! returned through out-pointers must be released with [`prm_string_free`],
//! models with [`prm_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prm_core::pipeline;
use prm_core::reward_model::{generative_score, FeaturizerConfig, LinearScorer, ModelError, PrmParams, TokenProbPair};
use prm_core::selection::{candidate_score, ScoreMode};
use prm_core::step_parser::{decompose_or_whole, ParseError, Provenance, SourceProgram, StepKind};
use serde_json::json;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Parse = 5,
    DimensionMismatch = 6,
    Internal = 7,
}

/// Trained scorer. Opaque to C callers.
pub struct PrmModel {
    scorer: LinearScorer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: PrmStatus, msg: impl Into<String>) -> PrmStatus {
    set_error(msg);
    status
}

fn model_status(e: &ModelError) -> PrmStatus {
    match e {
        ModelError::DimensionMismatch { .. } => PrmStatus::DimensionMismatch,
        ModelError::Parse(_) => PrmStatus::Parse,
        ModelError::Io(_) | ModelError::BadParamsFile(_) => PrmStatus::Io,
        _ => PrmStatus::InvalidArgument,
    }
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> Result<(), (PrmStatus, String)>) -> PrmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrmStatus::Ok
        }
        Ok(Err((status, msg))) => fail(status, msg),
        Err(_) => fail(PrmStatus::Internal, "panic inside prm"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (PrmStatus, String)> {
    if p.is_null() {
        return Err((PrmStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (PrmStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (PrmStatus, String)> {
    p.as_mut().ok_or_else(|| (PrmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn model_arg<'a>(p: *const PrmModel) -> Result<&'a PrmModel, (PrmStatus, String)> {
    p.as_ref().ok_or_else(|| (PrmStatus::NullPointer, "model is null".to_string()))
}

fn into_c_string(s: String) -> Result<*mut c_char, (PrmStatus, String)> {
    CString::new(s).map(CString::into_raw).map_err(|e| (PrmStatus::Internal, e.to_string()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn prm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library, or be null.
#[no_mangle]
pub unsafe extern "C" fn prm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads `params.bin` and `params.json` from a training output directory.
///
/// # Safety
/// `train_dir` must be a valid C string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prm_model_load(train_dir: *const c_char, out: *mut *mut PrmModel) -> PrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(train_dir, "train_dir")?;
        let scorer = pipeline::load_linear_scorer(Path::new(dir)).map_err(|e| (PrmStatus::Io, e.to_string()))?;
        *out = Box::into_raw(Box::new(PrmModel { scorer }));
        Ok(())
    })
}

/// Untrained model with all-zero weights; every score is 0.5.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prm_model_zeros(dimension: usize, out: *mut *mut PrmModel) -> PrmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        if dimension < 2 {
            return Err((PrmStatus::InvalidArgument, format!("dimension must be at least 2, got {dimension}")));
        }
        let scorer = LinearScorer::new(PrmParams::zeros(dimension), FeaturizerConfig { dim: dimension })
            .map_err(|e| (model_status(&e), e.to_string()))?;
        *out = Box::into_raw(Box::new(PrmModel { scorer }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `prm_model_load`/`prm_model_zeros`, or be null.
#[no_mangle]
pub unsafe extern "C" fn prm_model_free(model: *mut PrmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension, or 0 for a null model.
///
/// # Safety
/// `model` must be a live model or null.
#[no_mangle]
pub unsafe extern "C" fn prm_model_dimension(model: *const PrmModel) -> usize {
    model.as_ref().map_or(0, |m| m.scorer.featurizer.dim)
}

/// Score of one (statement, partial program) pair.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn prm_model_score_text(
    model: *const PrmModel,
    statement: *const c_char,
    text: *const c_char,
    out_score: *mut f64,
) -> PrmStatus {
    use prm_core::reward_model::StepScorer;
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out_score, "out_score")?;
        let statement = str_arg(statement, "statement")?;
        let text = str_arg(text, "text")?;
        *out = m.scorer.score_text(statement, text).map_err(|e| (model_status(&e), e.to_string()))?;
        Ok(())
    })
}

/// Scores a full program. `mode` 0 averages over step prefixes, 1 scores
/// the final program only.
///
/// # Safety
/// Pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn prm_model_score_trajectory(
    model: *const PrmModel,
    statement: *const c_char,
    program: *const c_char,
    mode: u32,
    out_score: *mut f64,
) -> PrmStatus {
    guard(|| {
        let m = model_arg(model)?;
        let out = out_arg(out_score, "out_score")?;
        let statement = str_arg(statement, "statement")?;
        let program = str_arg(program, "program")?;
        let mode = match mode {
            0 => ScoreMode::Prm,
            1 => ScoreMode::Orm,
            other => return Err((PrmStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        let source = SourceProgram::new("ffi", program, Provenance::Fixture);
        let (seq, _) = decompose_or_whole(&source).map_err(|e| (PrmStatus::Parse, e.to_string()))?;
        *out = candidate_score(&m.scorer, &seq, statement, mode).map_err(|e| (model_status(&e), e.to_string()))?;
        Ok(())
    })
}

/// Splits a program into steps and writes a JSON description to `out_json`.
/// Spans are byte offsets into the input.
///
/// # Safety
/// `program` must be a valid C string; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prm_decompose_json(program: *const c_char, out_json: *mut *mut c_char) -> PrmStatus {
    guard(|| {
        let out = out_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let text = str_arg(program, "program")?;
        let source = SourceProgram::new("ffi", text, Provenance::Fixture);
        let (seq, fallback_reason) = decompose_or_whole(&source).map_err(|e| match e {
            ParseError::EmptyProgram => (PrmStatus::Parse, e.to_string()),
            other => (PrmStatus::Internal, other.to_string()),
        })?;
        let steps: Vec<_> = seq
            .steps
            .iter()
            .map(|s| {
                json!({
                    "index": s.index,
                    "name": s.name,
                    "docstring": s.docstring,
                    "kind": match s.kind {
                        StepKind::Function => "function",
                        StepKind::Method => "method",
                        StepKind::WholeProgram => "whole_program",
                    },
                    "start": s.source_span.start,
                    "end": s.source_span.end,
                })
            })
            .collect();
        let doc = json!({
            "steps": steps,
            "fallback": seq.is_fallback(),
            "fallback_reason": fallback_reason.map(|e| e.to_string()),
            "preamble": [seq.preamble_span.start, seq.preamble_span.end],
            "trailer": [seq.trailer_span.start, seq.trailer_span.end],
        });
        *out = into_c_string(doc.to_string())?;
        Ok(())
    })
}

/// `p_plus / (p_plus + p_minus)`.
///
/// # Safety
/// `out_score` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn prm_generative_score(p_plus: f64, p_minus: f64, out_score: *mut f64) -> PrmStatus {
    guard(|| {
        let out = out_arg(out_score, "out_score")?;
        *out = generative_score(TokenProbPair { p_plus, p_minus }).map_err(|e| (model_status(&e), e.to_string()))?;
        Ok(())
    })
}
