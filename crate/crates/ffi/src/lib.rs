//! C ABI over the `uqsim` harness.
//!
//! Every fallible call returns a [`UqsimStatus`]; on anything but
//! `UQSIM_STATUS_OK` the message is available from [`uqsim_last_error`] on the
//! same thread. Objects cross the boundary as opaque handles and must be
//! released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use uqsim::config::{parse_config_str, ExperimentConfig};
use uqsim::decompose::{der_decomposition, variance_decomposition, UncertaintyEstimate};
use uqsim::dgp::{generate_dataset, DgpSpec};
use uqsim::experiment::{
    evaluate_predictor, fit_method, inference_members, run_experiment, verify_artifact, RunArtifact,
};
use uqsim::methods::{MethodKind, NigParams, SecondOrderPredictor, SecondOrderSample};
use uqsim::nn::FirstOrderPrediction;
use uqsim::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqsimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Training = 4,
    Method = 5,
    Config = 6,
    Report = 7,
    Parse = 8,
    Io = 9,
    Panic = 10,
}

impl From<&Error> for UqsimStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Contract(_) => UqsimStatus::InvalidArgument,
            Error::Numeric { .. } => UqsimStatus::Numeric,
            Error::Training { .. } => UqsimStatus::Training,
            Error::Method { .. } => UqsimStatus::Method,
            Error::Config { .. } => UqsimStatus::Config,
            Error::Report { .. } => UqsimStatus::Report,
            Error::Parse(_) => UqsimStatus::Parse,
            Error::Io { .. } => UqsimStatus::Io,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UqsimEstimate {
    pub aleatoric: f64,
    pub epistemic: f64,
}

impl From<UncertaintyEstimate> for UqsimEstimate {
    fn from(e: UncertaintyEstimate) -> Self {
        UqsimEstimate {
            aleatoric: e.aleatoric,
            epistemic: e.epistemic,
        }
    }
}

/// Grid-averaged metrics of one completed task.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UqsimRunMetrics {
    pub n: usize,
    pub run_seed: u64,
    pub mean_aleatoric: f64,
    pub mean_epistemic: f64,
    pub mean_bias: f64,
    pub mean_sigma_distance: f64,
}

pub struct UqsimConfig {
    inner: ExperimentConfig,
}

pub struct UqsimArtifact {
    inner: RunArtifact,
    methods: Vec<CString>,
}

pub struct UqsimPredictor {
    inner: Box<dyn SecondOrderPredictor>,
    members: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(UqsimStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(UqsimStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(UqsimStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UqsimStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UqsimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            UqsimStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside uqsim");
            UqsimStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `uqsim_` call on the same thread.
#[no_mangle]
pub extern "C" fn uqsim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Configuration with every default filled in.
#[no_mangle]
pub extern "C" fn uqsim_config_default() -> *mut UqsimConfig {
    Box::into_raw(Box::new(UqsimConfig {
        inner: ExperimentConfig::default(),
    }))
}

/// Parses a TOML configuration document.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn uqsim_config_parse(text: *const c_char, out: *mut *mut UqsimConfig) -> UqsimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = parse_config_str(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(UqsimConfig { inner }));
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqsim_config_free(cfg: *mut UqsimConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Runs the experiment and writes its outputs into `output_dir`. Task
/// failures do not make the call fail; see
/// [`uqsim_artifact_failure_count`].
///
/// # Safety
/// `cfg` must be a live handle, `output_dir` a NUL-terminated path and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_run_experiment(
    cfg: *const UqsimConfig,
    output_dir: *const c_char,
    out: *mut *mut UqsimArtifact,
) -> UqsimStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(output_dir, "output_dir")?);
        let inner = run_experiment(&cfg.inner, &dir)?;
        let methods = inner
            .results
            .iter()
            .map(|r| CString::new(r.key.method.clone()).unwrap_or_default())
            .collect();
        *out = Box::into_raw(Box::new(UqsimArtifact { inner, methods }));
        Ok(())
    })
}

/// Number of tasks that completed.
///
/// # Safety
/// `art` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uqsim_artifact_result_count(art: *const UqsimArtifact) -> usize {
    art.as_ref().map_or(0, |a| a.inner.results.len())
}

/// Number of tasks recorded as failed in the manifest.
///
/// # Safety
/// `art` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uqsim_artifact_failure_count(art: *const UqsimArtifact) -> usize {
    art.as_ref().map_or(0, |a| a.inner.manifest.failures.len())
}

/// Method name of completed task `index`; null when out of range. Owned by
/// the artifact.
///
/// # Safety
/// `art` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uqsim_artifact_method(art: *const UqsimArtifact, index: usize) -> *const c_char {
    art.as_ref()
        .and_then(|a| a.methods.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// # Safety
/// `art` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_artifact_metrics(
    art: *const UqsimArtifact,
    index: usize,
    out: *mut UqsimRunMetrics,
) -> UqsimStatus {
    guard(|| {
        let art = art.as_ref().ok_or_else(|| null("art"))?;
        let out = out_arg(out, "out")?;
        let r = art
            .inner
            .results
            .get(index)
            .ok_or_else(|| invalid(format!("index {index} out of range")))?;
        let m = &r.metrics;
        *out = UqsimRunMetrics {
            n: m.n,
            run_seed: m.run_seed,
            mean_aleatoric: m.mean_aleatoric,
            mean_epistemic: m.mean_epistemic,
            mean_bias: m.mean_bias,
            mean_sigma_distance: m.mean_sigma_distance,
        };
        Ok(())
    })
}

/// # Safety
/// `art` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqsim_artifact_free(art: *mut UqsimArtifact) {
    if !art.is_null() {
        drop(Box::from_raw(art));
    }
}

/// Checks a run directory; `passed` is false if any file fails.
///
/// # Safety
/// `dir` must be a NUL-terminated path and `passed` writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_verify_artifact(dir: *const c_char, passed: *mut bool) -> UqsimStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let report = verify_artifact(&PathBuf::from(str_arg(dir, "dir")?))?;
        *passed = report.passed();
        if !*passed {
            set_last_error(&report.render());
        }
        Ok(())
    })
}

/// Fits one method on the training sample of run `run_seed` at size `n`.
///
/// # Safety
/// `cfg` must be a live handle, `method` a NUL-terminated name and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_fit_method(
    cfg: *const UqsimConfig,
    method: *const c_char,
    n: usize,
    run_seed: u64,
    out: *mut *mut UqsimPredictor,
) -> UqsimStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let name = str_arg(method, "method")?;
        let kind = MethodKind::from_name(name).ok_or_else(|| invalid(format!("unknown method `{name}`")))?;
        cfg.inner.validate()?;
        let inner = fit_method(&cfg.inner, kind, n, run_seed)?;
        let members = inference_members(&cfg.inner, kind);
        *out = Box::into_raw(Box::new(UqsimPredictor { inner, members }));
        Ok(())
    })
}

/// Predictive mean and decomposition at each of `len` inputs. `members`
/// of zero uses the configured count.
///
/// # Safety
/// `pred` must be a live handle; `xs`, `means` and `estimates` must each
/// hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn uqsim_predictor_evaluate(
    pred: *mut UqsimPredictor,
    xs: *const f64,
    len: usize,
    members: usize,
    means: *mut f64,
    estimates: *mut UqsimEstimate,
) -> UqsimStatus {
    guard(|| {
        let pred = out_arg(pred, "pred")?;
        let xs = slice_arg(xs, len, "xs")?;
        if len > 0 && (means.is_null() || estimates.is_null()) {
            return Err(null("means/estimates"));
        }
        let d = if members == 0 { pred.members } else { members };
        let points = evaluate_predictor(pred.inner.as_mut(), xs, d)?;
        for (i, p) in points.iter().enumerate() {
            *means.add(i) = p.pred_mean;
            *estimates.add(i) = p.estimate.into();
        }
        Ok(())
    })
}

/// # Safety
/// `pred` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqsim_predictor_free(pred: *mut UqsimPredictor) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

/// Law-of-total-variance split of `len` Gaussian members.
///
/// # Safety
/// `means` and `variances` must hold `len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_variance_decomposition(
    means: *const f64,
    variances: *const f64,
    len: usize,
    out: *mut UqsimEstimate,
) -> UqsimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let means = slice_arg(means, len, "means")?;
        let variances = slice_arg(variances, len, "variances")?;
        let members = means
            .iter()
            .zip(variances)
            .map(|(&mean, &variance)| FirstOrderPrediction { mean, variance })
            .collect();
        *out = variance_decomposition(&SecondOrderSample::new(0.0, members)?)?.into();
        Ok(())
    })
}

/// Closed-form split of a Normal-Inverse-Gamma prediction.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqsim_der_decomposition(
    gamma: f64,
    nu: f64,
    alpha: f64,
    beta: f64,
    out: *mut UqsimEstimate,
) -> UqsimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = der_decomposition(&NigParams::new(gamma, nu, alpha, beta)?)?.into();
        Ok(())
    })
}

/// Draws `n` training pairs from the synthetic process with the given Beta
/// input law.
///
/// # Safety
/// `xs` and `ys` must each have room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn uqsim_generate_dataset(
    beta_alpha: f64,
    beta_beta: f64,
    n: usize,
    seed: u64,
    xs: *mut f64,
    ys: *mut f64,
) -> UqsimStatus {
    guard(|| {
        if n > 0 && (xs.is_null() || ys.is_null()) {
            return Err(null("xs/ys"));
        }
        let spec = DgpSpec {
            beta_alpha,
            beta_beta,
            ..DgpSpec::default()
        };
        let data = generate_dataset(&spec, n, seed)?;
        ptr::copy_nonoverlapping(data.xs.as_ptr(), xs, n);
        ptr::copy_nonoverlapping(data.ys.as_ptr(), ys, n);
        Ok(())
    })
}
