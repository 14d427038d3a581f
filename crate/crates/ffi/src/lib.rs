//! C ABI over the tsdiff sampling engine.
//!
//! Every function returns a [`TsdStatus`]. On failure the message is kept in a
//! thread-local slot readable with [`tsd_last_error_message`]. Objects are
//! opaque handles created by `*_new` functions and released by `*_free`.
//! Panics never cross the boundary; they surface as [`TsdStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use tsdiff::denoisers::{AnalyticDenoiser, Checkpoint, DenoiserModel, EpsilonModel, GaussianMoments, Mixture, PerturbationSpec};
use tsdiff::samplers::{run_sampler, Method, SamplerConfig};
use tsdiff::schedule::{select_time_grid, GridMode, NoiseSchedule};
use tsdiff::theory::{optimal_shift_variance, TheoremProbe};
use tsdiff::timeshift::{intra_sample_variance, run_time_shift_sampler, select_shifted_timestep, ShiftConfig};
use tsdiff::{Error, ErrorCategory};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Invariant = 4,
    Diverged = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsdMethod {
    Ddpm = 0,
    Ddim = 1,
    SPndm = 2,
    FPndm = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsdGrid {
    Uniform = 0,
    Quadratic = 1,
}

/// Sampling request. `window == 0` disables time shifting.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct TsdSampleParams {
    pub method: TsdMethod,
    pub grid: TsdGrid,
    pub steps: usize,
    pub n: usize,
    pub eta: f64,
    pub seed: u64,
    pub window: usize,
    pub cutoff: usize,
}

/// Opaque noise schedule.
pub struct TsdSchedule(NoiseSchedule);

/// Opaque ε-predictor.
pub struct TsdModel(DenoiserModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TsdStatus {
    match e.category() {
        ErrorCategory::Config => TsdStatus::InvalidArgument,
        ErrorCategory::Io => TsdStatus::Io,
        ErrorCategory::Invariant => TsdStatus::Invariant,
        ErrorCategory::Diverged => TsdStatus::Diverged,
    }
}

struct Fail(TsdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(TsdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TsdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TsdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            TsdStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated, truncated
/// to `len`). Returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tsd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Linear β schedule.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_schedule_new_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut TsdSchedule,
) -> TsdStatus {
    guard(|| {
        let s = NoiseSchedule::linear(steps, beta_start, beta_end)?;
        write(out, Box::into_raw(Box::new(TsdSchedule(s))))
    })
}

/// # Safety
/// `schedule` must be null or a handle from `tsd_schedule_new_linear` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tsd_schedule_free(schedule: *mut TsdSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// # Safety
/// `schedule` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_schedule_len(schedule: *const TsdSchedule, out: *mut usize) -> TsdStatus {
    guard(|| {
        let s = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        write(out, s.0.len())
    })
}

/// ᾱ_t.
///
/// # Safety
/// `schedule` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_schedule_alpha_bar(schedule: *const TsdSchedule, t: usize, out: *mut f64) -> TsdStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        s.check_timestep(t)?;
        write(out, s.alpha_bar(t))
    })
}

/// Exact ε-predictor for isotropic Gaussian data `N(mean, variance·I)`.
///
/// # Safety
/// `schedule` must be a live handle, `mean` must point to `dim` doubles, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_model_new_gaussian(
    schedule: *const TsdSchedule,
    mean: *const f64,
    dim: usize,
    variance: f64,
    out: *mut *mut TsdModel,
) -> TsdStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        let mean = slice(mean, dim, "mean")?;
        if dim == 0 {
            return Err(Fail(TsdStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let mix = Mixture::single(GaussianMoments::isotropic(mean.to_vec(), variance))?;
        let m = DenoiserModel::Analytic(AnalyticDenoiser::new(mix, s.clone()));
        write(out, Box::into_raw(Box::new(TsdModel(m))))
    })
}

/// Loads a JSON checkpoint; its schedule must match `schedule`.
///
/// # Safety
/// `schedule` must be a live handle, `path` a NUL-terminated UTF-8 string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_model_load(schedule: *const TsdSchedule, path: *const c_char, out: *mut *mut TsdModel) -> TsdStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(TsdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let m = Checkpoint::load(Path::new(path))?.to_model(s)?;
        write(out, Box::into_raw(Box::new(TsdModel(m))))
    })
}

/// Wraps the model so each step carries a state error of relative size `phi`.
///
/// # Safety
/// `model` and `schedule` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn tsd_model_perturb(
    model: *mut TsdModel,
    schedule: *const TsdSchedule,
    phi: f64,
    key: u64,
) -> TsdStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let inner = m.0.clone();
        m.0 = inner.perturbed(PerturbationSpec::constant(s.len(), phi, key))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsd_model_free(model: *mut TsdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_model_dim(model: *const TsdModel, out: *mut usize) -> TsdStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        write(out, m.0.dim())
    })
}

/// Runs a sampler and writes `n × dim` row-major samples into `out`.
///
/// # Safety
/// Handles must be live, `params` valid, `out` must point to `out_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tsd_sample(
    model: *const TsdModel,
    schedule: *const TsdSchedule,
    params: *const TsdSampleParams,
    out: *mut f64,
    out_len: usize,
) -> TsdStatus {
    guard(|| {
        let m = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        let p = params.as_ref().ok_or_else(|| null("params"))?;
        let need = p.n.checked_mul(m.dim()).ok_or_else(|| Fail(TsdStatus::InvalidArgument, "n × dim overflows".into()))?;
        if out_len < need {
            return Err(Fail(TsdStatus::BufferTooSmall, format!("need {need} doubles, got {out_len}")));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let method = match p.method {
            TsdMethod::Ddpm => Method::Ddpm,
            TsdMethod::Ddim => Method::Ddim,
            TsdMethod::SPndm => Method::SPndm,
            TsdMethod::FPndm => Method::FPndm,
        };
        let mode = match p.grid {
            TsdGrid::Uniform => GridMode::Uniform,
            TsdGrid::Quadratic => GridMode::Quadratic,
        };
        let mut cfg = SamplerConfig::new(method, select_time_grid(s, p.steps, mode)?, p.n, p.seed);
        cfg.eta = p.eta;
        let (x, _) = if p.window > 0 {
            run_time_shift_sampler(&cfg, &ShiftConfig::new(p.window, p.cutoff), m, s)?
        } else {
            run_sampler(&cfg, m, s)?
        };
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(x.as_slice());
        Ok(())
    })
}

/// Sample variance (divisor d−1) of one flattened state.
///
/// # Safety
/// `x` must point to `len` doubles; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_intra_sample_variance(x: *const f64, len: usize, out: *mut f64) -> TsdStatus {
    guard(|| {
        let x = slice(x, len, "x")?;
        write(out, intra_sample_variance(x)?)
    })
}

/// Timestep in the window around `center` whose 1−ᾱ is closest to `variance`.
///
/// # Safety
/// `schedule` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_select_shifted_timestep(
    schedule: *const TsdSchedule,
    variance: f64,
    center: usize,
    window: usize,
    out: *mut usize,
) -> TsdStatus {
    guard(|| {
        let s = &schedule.as_ref().ok_or_else(|| null("schedule"))?.0;
        write(out, select_shifted_timestep(variance, center, window, s)?)
    })
}

/// σ_{t−1} − ‖e‖²/(d(d−1)).
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tsd_optimal_shift_variance(
    sigma_prev: f64,
    err_sq: f64,
    dim: usize,
    t: usize,
    out: *mut f64,
) -> TsdStatus {
    guard(|| write(out, optimal_shift_variance(&TheoremProbe { sigma_prev, err_sq, d: dim, t })?))
}
