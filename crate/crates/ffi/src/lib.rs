//! C ABI for drlab.
//!
//! Every function returns a [`DrlabStatus`]; on failure the message is
//! available from [`drlab_last_error`] on the same thread. Buffers passed in
//! are borrowed for the duration of the call only. Strings returned through
//! out-pointers must be released with [`drlab_string_free`] and models with
//! [`drlab_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use drlab::baselines::{self, Projection};
use drlab::experiment::{self, DataStore, ExperimentConfig};
use drlab::metrics::{self, AccuracyMatrix};
use drlab::{nn, Activation, Error, MlpModel, Tensor2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrlabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Divergence = 5,
    Io = 6,
    Format = 7,
    Ingest = 8,
    Spectrum = 9,
    Internal = 10,
    Panic = 11,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrlabActivation {
    Relu = 0,
    Tanh = 1,
    Identity = 2,
}

fn activation(code: i32) -> Result<Activation, Failure> {
    match code {
        x if x == DrlabActivation::Relu as i32 => Ok(Activation::Relu),
        x if x == DrlabActivation::Tanh as i32 => Ok(Activation::Tanh),
        x if x == DrlabActivation::Identity as i32 => Ok(Activation::Identity),
        _ => Err(invalid(format!("unknown activation {code}"))),
    }
}

/// Opaque network handle.
pub struct DrlabModel {
    inner: MlpModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(DrlabStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape(_) => DrlabStatus::Shape,
            Error::Config(_) | Error::UnknownScenario(_) => DrlabStatus::Config,
            Error::Divergence(_) => DrlabStatus::Divergence,
            Error::Io { .. } => DrlabStatus::Io,
            Error::Format { .. } | Error::Json(_) => DrlabStatus::Format,
            Error::Ingest(_) => DrlabStatus::Ingest,
            Error::Spectrum(_) => DrlabStatus::Spectrum,
            _ => DrlabStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DrlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DrlabStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            DrlabStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DrlabStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(DrlabStatus::InvalidArgument, msg.into())
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn model<'a>(p: *const DrlabModel) -> Result<&'a DrlabModel, Failure> {
    p.as_ref().ok_or_else(|| null("model"))
}

unsafe fn string<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Tensor2, Failure> {
    Ok(Tensor2::new(rows, cols, data.to_vec())?)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next drlab call on the same thread.
#[no_mangle]
pub extern "C" fn drlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn drlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn drlab_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Creates a randomly initialised network with layer widths `dims[0..n_dims]`;
/// `activation` is a `DrlabActivation` value.
#[no_mangle]
pub unsafe extern "C" fn drlab_model_new(
    dims: *const usize,
    n_dims: usize,
    activation_code: i32,
    seed: u64,
    out_model: *mut *mut DrlabModel,
) -> DrlabStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let dims = slice(dims, n_dims, "dims")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = MlpModel::new(dims, activation(activation_code)?, &mut rng)?;
        *out_model = Box::into_raw(Box::new(DrlabModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by [`drlab_model_save`] or the CLI.
#[no_mangle]
pub unsafe extern "C" fn drlab_model_load(path: *const c_char, out_model: *mut *mut DrlabModel) -> DrlabStatus {
    guard(|| {
        let out_model = out(out_model, "out_model")?;
        let inner = MlpModel::load(Path::new(string(path, "path")?))?;
        *out_model = Box::into_raw(Box::new(DrlabModel { inner }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drlab_model_save(m: *const DrlabModel, path: *const c_char) -> DrlabStatus {
    guard(|| {
        model(m)?.inner.save(Path::new(string(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drlab_model_free(m: *mut DrlabModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

#[no_mangle]
pub unsafe extern "C" fn drlab_model_input_dim(m: *const DrlabModel, out_dim: *mut usize) -> DrlabStatus {
    guard(|| {
        *out(out_dim, "out_dim")? = model(m)?.inner.input_dim();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drlab_model_n_classes(m: *const DrlabModel, out_n: *mut usize) -> DrlabStatus {
    guard(|| {
        *out(out_n, "out_n")? = model(m)?.inner.n_classes();
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn drlab_model_param_count(m: *const DrlabModel, out_n: *mut usize) -> DrlabStatus {
    guard(|| {
        *out(out_n, "out_n")? = model(m)?.inner.param_count();
        Ok(())
    })
}

/// Logits for `rows` inputs stored row-major in `x`; `logits` must hold
/// `rows * n_classes` values.
#[no_mangle]
pub unsafe extern "C" fn drlab_model_forward(
    m: *const DrlabModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    logits: *mut f64,
    logits_len: usize,
) -> DrlabStatus {
    guard(|| {
        let m = &model(m)?.inner;
        let x = matrix(slice(x, rows * cols, "x")?, rows, cols)?;
        let want = rows * m.n_classes();
        if logits_len != want {
            return Err(invalid(format!("logits buffer holds {logits_len} values, need {want}")));
        }
        let trace = nn::forward(m, &x)?;
        slice_mut(logits, want, "logits")?.copy_from_slice(trace.logits.data());
        Ok(())
    })
}

/// Argmax class per input row; `predictions` must hold `rows` entries.
#[no_mangle]
pub unsafe extern "C" fn drlab_model_predict(
    m: *const DrlabModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    predictions: *mut usize,
) -> DrlabStatus {
    guard(|| {
        let m = &model(m)?.inner;
        let x = matrix(slice(x, rows * cols, "x")?, rows, cols)?;
        let trace = nn::forward(m, &x)?;
        slice_mut(predictions, rows, "predictions")?.copy_from_slice(&trace.predictions());
        Ok(())
    })
}

/// Projects `g` onto the half-space `⟨g, g_ref⟩ ≥ 0`. `projected` is set to 1
/// when the projection changed `g`.
#[no_mangle]
pub unsafe extern "C" fn drlab_agem_project(
    g: *const f64,
    g_ref: *const f64,
    len: usize,
    out_g: *mut f64,
    projected: *mut i32,
) -> DrlabStatus {
    guard(|| {
        let (p, how) = baselines::agem_project(slice(g, len, "g")?, slice(g_ref, len, "g_ref")?);
        slice_mut(out_g, len, "out_g")?.copy_from_slice(&p);
        if let Some(flag) = projected.as_mut() {
            *flag = i32::from(how == Projection::Projected);
        }
        Ok(())
    })
}

/// Spectral spread ρ of a `rows × cols` representation matrix.
#[no_mangle]
pub unsafe extern "C" fn drlab_rho(reps: *const f64, rows: usize, cols: usize, out_rho: *mut f64) -> DrlabStatus {
    guard(|| {
        let out_rho = out(out_rho, "out_rho")?;
        let r = matrix(slice(reps, rows * cols, "reps")?, rows, cols)?;
        *out_rho = metrics::rho_spectrum(&r)?.rho;
        Ok(())
    })
}

fn lower_triangle(acc: &[f64], n_tasks: usize) -> Result<AccuracyMatrix, Failure> {
    let rows = (0..n_tasks).map(|t| acc[t * n_tasks..t * n_tasks + t + 1].to_vec()).collect();
    Ok(AccuracyMatrix::from_rows(rows)?)
}

/// Average accuracy after task `t` (1-based) from an `n_tasks × n_tasks`
/// row-major accuracy matrix; entries above the diagonal are ignored.
#[no_mangle]
pub unsafe extern "C" fn drlab_avg_accuracy(acc: *const f64, n_tasks: usize, t: usize, out_value: *mut f64) -> DrlabStatus {
    guard(|| {
        let out_value = out(out_value, "out_value")?;
        let a = lower_triangle(slice(acc, n_tasks * n_tasks, "acc")?, n_tasks)?;
        *out_value = metrics::avg_accuracy(&a, t)?;
        Ok(())
    })
}

/// Average forgetting after task `t` (1-based); same layout as [`drlab_avg_accuracy`].
#[no_mangle]
pub unsafe extern "C" fn drlab_avg_forgetting(acc: *const f64, n_tasks: usize, t: usize, out_value: *mut f64) -> DrlabStatus {
    guard(|| {
        let out_value = out(out_value, "out_value")?;
        let a = lower_triangle(slice(acc, n_tasks * n_tasks, "acc")?, n_tasks)?;
        *out_value = metrics::avg_forgetting(&a, t)?;
        Ok(())
    })
}

/// Runs an experiment described by a JSON config and returns the run
/// artifacts as a JSON array. `data_dir` may be null to use the environment.
#[no_mangle]
pub unsafe extern "C" fn drlab_run_json(
    config_json: *const c_char,
    data_dir: *const c_char,
    out_json: *mut *mut c_char,
) -> DrlabStatus {
    guard(|| {
        let out_json = out(out_json, "out_json")?;
        let cfg = ExperimentConfig::from_json(string(config_json, "config_json")?)?;
        let store = if data_dir.is_null() {
            DataStore::from_env()
        } else {
            DataStore::new(string(data_dir, "data_dir")?)
        };
        let artifacts = experiment::run(&cfg, &store)?;
        let text = serde_json::to_string(&artifacts).map_err(Error::from)?;
        *out_json = into_c_string(text)?;
        Ok(())
    })
}

/// Recomputes the summary table of a directory of artifacts and returns it
/// as text.
#[no_mangle]
pub unsafe extern "C" fn drlab_summarize(dir: *const c_char, out_text: *mut *mut c_char) -> DrlabStatus {
    guard(|| {
        let out_text = out(out_text, "out_text")?;
        let s = experiment::summarize(Path::new(string(dir, "dir")?))?;
        *out_text = into_c_string(s.to_text())?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_mapping() {
        let f: Failure = Error::Divergence("x".into()).into();
        assert_eq!(f.0, DrlabStatus::Divergence);
        let f: Failure = Error::UnknownScenario("x".into()).into();
        assert_eq!(f.0, DrlabStatus::Config);
    }
}
