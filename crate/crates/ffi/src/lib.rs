//! C ABI over the localization engine.
//!
//! Every fallible call returns an [`AttnlocStatus`]; on failure the message
//! is available from [`attnloc_last_error`] on the same thread until the next
//! failing call. Objects are opaque handles released with their `_free`
//! function. Panics never cross the boundary; they surface as
//! `ATTNLOC_STATUS_PANIC`.
//!
//! The header `include/attnloc.h` is regenerated by the build script.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use attnloc::backend::dump::DumpBackend;
use attnloc::backend::toy::{ToyConfig, ToyTransformer};
use attnloc::backend::{BackendError, REDUCED_ROW_TOLERANCE};
use attnloc::backend::http::WIRE_TOLERANCE;
use attnloc::classifier::{self, FeatureSequence, SequenceModel};
use attnloc::corpus::{split_lines, CodeSample};
use attnloc::evaluation::f1_score;
use attnloc::matrix::Matrix;
use attnloc::pipeline::{self, Backend, PipelineError};
use attnloc::prompting::{HighlightStrategy, PromptTemplate};
use attnloc::reduction::FlattenStrategy;
use attnloc::scoring::{baseline_score, RunOutputs};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnlocStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    BackendError = 4,
    DataError = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnlocHighlight {
    LineIndex = 0,
    MarkerComment = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnlocFlatten {
    Layerwise = 0,
    AvgPool = 1,
}

/// Attention provider handle.
pub struct AttnlocBackend(Backend);

/// Row-major `f64` matrix handle.
pub struct AttnlocMatrix(Matrix);

/// Trained classifier handle.
pub struct AttnlocModel(SequenceModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(AttnlocStatus, String);

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::Config(_) => AttnlocStatus::ConfigError,
            PipelineError::Backend(_) => AttnlocStatus::BackendError,
            PipelineError::Data(_) => AttnlocStatus::DataError,
        };
        Failure(status, e.to_string())
    }
}

impl From<BackendError> for Failure {
    fn from(e: BackendError) -> Self {
        PipelineError::from(e).into()
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AttnlocStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AttnlocStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            AttnlocStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(AttnlocStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(AttnlocStatus::InvalidArgument, message.into())
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

/// # Safety
/// `p` must be null or point to a live `T`.
unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn out_arg<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: checked non-null; the caller provides a writable slot.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

/// Message of the last failure on this thread, or null. Owned by the
/// library and valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn attnloc_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn attnloc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Built-in toy transformer with the given shape.
#[no_mangle]
pub extern "C" fn attnloc_toy_backend_new(
    seed: u64,
    d_model: usize,
    num_layers: usize,
    num_heads: usize,
    out: *mut *mut AttnlocBackend,
) -> AttnlocStatus {
    guard(|| {
        let config = ToyConfig {
            d_model,
            num_layers,
            num_heads,
            ..ToyConfig::default()
        };
        let toy = ToyTransformer::from_seed(seed, config)?;
        out_arg(
            out,
            AttnlocBackend(Backend {
                inner: Box::new(toy),
                tolerance: REDUCED_ROW_TOLERANCE,
            }),
        )
    })
}

/// Backend serving attention dumps from `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn attnloc_dump_backend_new(dir: *const c_char, out: *mut *mut AttnlocBackend) -> AttnlocStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        let backend = DumpBackend::new(dir);
        backend.probe()?;
        out_arg(
            out,
            AttnlocBackend(Backend {
                inner: Box::new(backend),
                tolerance: WIRE_TOLERANCE,
            }),
        )
    })
}

/// # Safety
/// `backend` must be null or a handle from a `_new` call, freed once.
#[no_mangle]
pub unsafe extern "C" fn attnloc_backend_free(backend: *mut AttnlocBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

/// # Safety
/// `backend` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn attnloc_backend_shape(
    backend: *const AttnlocBackend,
    num_layers: *mut usize,
    num_heads: *mut usize,
) -> AttnlocStatus {
    guard(|| {
        let b = ref_arg(backend, "backend")?;
        if num_layers.is_null() || num_heads.is_null() {
            return Err(null("out"));
        }
        let d = b.0.inner.descriptor();
        *num_layers = d.num_layers;
        *num_heads = d.num_heads;
        Ok(())
    })
}

/// Per-line feature matrix (`loc × feature_len`) for one program.
///
/// # Safety
/// `backend` must be a live handle, `code` and `language` NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnloc_sample_features(
    backend: *const AttnlocBackend,
    code: *const c_char,
    language: *const c_char,
    highlight: AttnlocHighlight,
    flatten: AttnlocFlatten,
    out: *mut *mut AttnlocMatrix,
) -> AttnlocStatus {
    guard(|| {
        let b = ref_arg(backend, "backend")?;
        let code = str_arg(code, "code")?;
        let language = str_arg(language, "language")?;
        let lines = split_lines(code);
        if lines.is_empty() {
            return Err(invalid("code has no lines"));
        }
        // labels are not needed to build prompts
        let sample = CodeSample {
            id: "ffi".into(),
            language: language.into(),
            source: code.into(),
            lines,
            vuln_lines: Default::default(),
        };
        let highlight = match highlight {
            AttnlocHighlight::LineIndex => HighlightStrategy::LineIndex,
            AttnlocHighlight::MarkerComment => HighlightStrategy::MarkerComment,
        };
        let flatten = match flatten {
            AttnlocFlatten::Layerwise => FlattenStrategy::Layerwise,
            AttnlocFlatten::AvgPool => FlattenStrategy::AvgPool,
        };
        let mats = pipeline::sample_vuln_mats(&b.0, &sample, highlight, &PromptTemplate::default())?;
        let rows: Vec<Vec<f64>> = mats.iter().map(|m| attnloc::reduction::flatten(m, flatten)).collect();
        let m = Matrix::from_rows(&rows).ok_or_else(|| invalid("ragged feature rows"))?;
        out_arg(out, AttnlocMatrix(m))
    })
}

/// Copies `rows × cols` values (row-major) into a new matrix.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnloc_matrix_new(
    data: *const f64,
    rows: usize,
    cols: usize,
    out: *mut *mut AttnlocMatrix,
) -> AttnlocStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("matrix too large"))?;
        if data.is_null() && n > 0 {
            return Err(null("data"));
        }
        let values = if n == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(data, n).to_vec()
        };
        let m = Matrix::from_vec(rows, cols, values).ok_or_else(|| invalid("shape mismatch"))?;
        out_arg(out, AttnlocMatrix(m))
    })
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attnloc_matrix_rows(m: *const AttnlocMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.rows())
}

/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attnloc_matrix_cols(m: *const AttnlocMatrix) -> usize {
    m.as_ref().map_or(0, |m| m.0.cols())
}

/// Copies the row-major values into `buf`, which holds `len` doubles.
///
/// # Safety
/// `m` must be a live handle; `buf` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn attnloc_matrix_copy(m: *const AttnlocMatrix, buf: *mut f64, len: usize) -> AttnlocStatus {
    guard(|| {
        let m = ref_arg(m, "matrix")?;
        let data = m.0.as_slice();
        if len < data.len() {
            return Err(Failure(
                AttnlocStatus::BufferTooSmall,
                format!("buffer holds {len} values, matrix has {}", data.len()),
            ));
        }
        if buf.is_null() && !data.is_empty() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        Ok(())
    })
}

/// # Safety
/// `m` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn attnloc_matrix_free(m: *mut AttnlocMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Loads a model file written by `attnloc train`.
///
/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn attnloc_model_load(path: *const c_char, out: *mut *mut AttnlocModel) -> AttnlocStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let model = SequenceModel::load(Path::new(path)).map_err(PipelineError::from)?;
        out_arg(out, AttnlocModel(model))
    })
}

/// Feature dimension the model expects.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn attnloc_model_input_dim(model: *const AttnlocModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_dim)
}

/// Per-line probabilities for a feature matrix; writes `rows` values.
///
/// # Safety
/// Handles must be live; `out` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn attnloc_model_score(
    model: *const AttnlocModel,
    features: *const AttnlocMatrix,
    out: *mut f64,
    len: usize,
) -> AttnlocStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let m = &ref_arg(features, "features")?.0;
        if len < m.rows() {
            return Err(Failure(
                AttnlocStatus::BufferTooSmall,
                format!("buffer holds {len} values, need {}", m.rows()),
            ));
        }
        if out.is_null() && m.rows() > 0 {
            return Err(null("out"));
        }
        let seq = FeatureSequence {
            sample_id: "ffi".into(),
            language: String::new(),
            features: (0..m.rows()).map(|r| m.row(r).to_vec()).collect(),
            labels: None,
        };
        let scores = classifier::score(&model.0, &seq).map_err(PipelineError::from)?;
        ptr::copy_nonoverlapping(scores.as_ptr(), out, scores.len());
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn attnloc_model_free(model: *mut AttnlocModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Repeated-output baseline. `lines` concatenates the 1-based lines of all
/// `num_runs` runs; `run_lengths[i]` is the length of run `i`. Writes `loc`
/// scores into `out`.
///
/// # Safety
/// `lines` must hold `sum(run_lengths)` values, `run_lengths` `num_runs`
/// values and `out` `loc` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn attnloc_baseline_score(
    lines: *const usize,
    run_lengths: *const usize,
    num_runs: usize,
    loc: usize,
    out: *mut f64,
) -> AttnlocStatus {
    guard(|| {
        if num_runs == 0 {
            return Err(invalid("num_runs must be positive"));
        }
        if run_lengths.is_null() {
            return Err(null("run_lengths"));
        }
        let lengths = std::slice::from_raw_parts(run_lengths, num_runs);
        let total: usize = lengths.iter().sum();
        if lines.is_null() && total > 0 {
            return Err(null("lines"));
        }
        if out.is_null() && loc > 0 {
            return Err(null("out"));
        }
        let flat = if total == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(lines, total)
        };
        let mut runs = Vec::with_capacity(num_runs);
        let mut pos = 0;
        for &n in lengths {
            runs.push(flat[pos..pos + n].to_vec());
            pos += n;
        }
        let scores = baseline_score(
            &RunOutputs {
                sample_id: "ffi".into(),
                runs,
            },
            loc,
        )
        .map_err(|e| Failure(AttnlocStatus::DataError, e.to_string()))?;
        ptr::copy_nonoverlapping(scores.as_ptr(), out, scores.len());
        Ok(())
    })
}

/// Harmonic mean of precision and recall, 0 when both are 0.
#[no_mangle]
pub extern "C" fn attnloc_f1(precision: f64, recall: f64) -> f64 {
    f1_score(precision, recall)
}
