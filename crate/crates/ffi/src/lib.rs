//! C ABI over the `dpok` library.
//!
//! Objects are opaque heap handles created by `*_new`/`*_load`-style calls and
//! released with the matching `*_free`. Every fallible call returns a
//! [`DpokStatus`]; on failure a message for the calling thread is available
//! from [`dpok_last_error`] until the next failing call on that thread.
//! Panics are caught at the boundary and reported as `DPOK_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use dpok::diffusion::{sample_trajectory, ReverseCov, ScheduleKind};
use dpok::harness::{evaluate_against, pretrain_model, run_experiment, ExperimentConfig, ModelSpec};
use dpok::model::{load_checkpoint, save_checkpoint};
use dpok::pretrain::PretrainConfig;
use dpok::rewards::scenario_by_name;
use dpok::verify::verify_all;
use dpok::{Error, NoiseSchedule, ParamSnapshot, RewardScenario, ScheduleSpec};
use rand_chacha::rand_core::SeedableRng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DpokStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    Precondition = 6,
    Diverged = 7,
    Internal = 8,
}

/// Noise schedule handle.
pub struct DpokSchedule {
    spec: ScheduleSpec,
    schedule: NoiseSchedule,
}

/// Reward scenario handle.
pub struct DpokScenario {
    scenario: RewardScenario,
}

/// Frozen denoiser parameters.
pub struct DpokModel {
    snapshot: ParamSnapshot,
}

/// Aggregate evaluation metrics.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DpokMetrics {
    pub mean_reward: f64,
    pub reward_se: f64,
    pub mean_quality: f64,
    pub kl_to_pretrained: f64,
    pub target_mass: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(DpokStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn status_of(e: &Error) -> DpokStatus {
    match e {
        Error::Config { .. }
        | Error::Index { .. }
        | Error::Domain(_)
        | Error::UnknownPrompt(_)
        | Error::UnknownScenario(_)
        | Error::Compare(_) => DpokStatus::InvalidArgument,
        Error::Rollout { .. } | Error::Numeric { .. } | Error::GradCheck { .. } => DpokStatus::Numeric,
        Error::Diverged { .. } => DpokStatus::Diverged,
        Error::Precondition(_) => DpokStatus::Precondition,
        Error::Format(_) | Error::Json(_) => DpokStatus::Format,
        Error::Io(_) => DpokStatus::Io,
        Error::Stage { source, .. } => status_of(source),
    }
}

fn set_last_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DpokStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DpokStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_last_error(message);
            status
        }
        Err(payload) => {
            let what = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(format!("internal error: {what}"));
            DpokStatus::Internal
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(DpokStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(DpokStatus::InvalidArgument, message.into())
}

unsafe fn deref<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn utf8<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dpok_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dpok_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Linear β schedule from `beta_min` to `beta_max` over `horizon` steps.
/// `posterior_variance` selects the posterior variance as the reverse
/// variance; otherwise β_t is used.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_schedule_new(
    horizon: usize,
    beta_min: f64,
    beta_max: f64,
    posterior_variance: bool,
    out: *mut *mut DpokSchedule,
) -> DpokStatus {
    guard(|| {
        let spec = ScheduleSpec {
            horizon,
            beta_min,
            beta_max,
            kind: ScheduleKind::Linear,
            reverse_cov: if posterior_variance {
                ReverseCov::TildeBeta
            } else {
                ReverseCov::Beta
            },
        };
        let schedule = spec.build()?;
        write_out(out, DpokSchedule { spec, schedule }, "out")
    })
}

/// The default schedule (50 steps, β from 1e-3 to 0.2, posterior variance).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for a handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_schedule_default(out: *mut *mut DpokSchedule) -> DpokStatus {
    guard(|| {
        let spec = ScheduleSpec::default();
        let schedule = spec.build()?;
        write_out(out, DpokSchedule { spec, schedule }, "out")
    })
}

/// Number of steps, or 0 for a null handle.
///
/// # Safety
/// `schedule` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_schedule_horizon(schedule: *const DpokSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.schedule.horizon)
}

/// # Safety
/// `schedule` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpok_schedule_free(schedule: *mut DpokSchedule) {
    free(schedule)
}

/// One of the built-in scenarios: color, composition, counting, location,
/// multi, biased.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpok_scenario_by_name(name: *const c_char, out: *mut *mut DpokScenario) -> DpokStatus {
    guard(|| {
        let scenario = scenario_by_name(utf8(name, "name")?)?;
        write_out(out, DpokScenario { scenario }, "out")
    })
}

/// Sample dimension, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_scenario_dim(scenario: *const DpokScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.scenario.dim())
}

/// Number of prompts, or 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_scenario_prompt_count(scenario: *const DpokScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.scenario.prompt_count())
}

/// Reward of the sample `x0[0..dim]` under `prompt`.
///
/// # Safety
/// `x0` must point to `dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpok_scenario_reward(
    scenario: *const DpokScenario,
    x0: *const f64,
    dim: usize,
    prompt: usize,
    out: *mut f64,
) -> DpokStatus {
    guard(|| {
        let sc = &deref(scenario, "scenario")?.scenario;
        if x0.is_null() {
            return Err(null("x0"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if dim != sc.dim() {
            return Err(invalid(format!("dim {dim} does not match scenario dimension {}", sc.dim())));
        }
        *out = sc.reward(std::slice::from_raw_parts(x0, dim), prompt)?;
        Ok(())
    })
}

/// # Safety
/// `scenario` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpok_scenario_free(scenario: *mut DpokScenario) {
    free(scenario)
}

/// Trains the default network on the scenario's data for `steps` minibatch
/// steps.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_pretrain(
    schedule: *const DpokSchedule,
    scenario: *const DpokScenario,
    steps: usize,
    seed: u64,
    out: *mut *mut DpokModel,
) -> DpokStatus {
    guard(|| {
        let schedule = &deref(schedule, "schedule")?.schedule;
        let scenario = &deref(scenario, "scenario")?.scenario;
        let config = PretrainConfig {
            steps,
            ..Default::default()
        };
        let (snapshot, _) = pretrain_model(schedule, scenario, &ModelSpec::default(), &config, seed)?;
        write_out(out, DpokModel { snapshot }, "out")
    })
}

/// Loads a checkpoint. When `out_schedule` is non-null and the checkpoint
/// records its schedule, a schedule handle is written there too (NULL
/// otherwise).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable;
/// `out_schedule` may be null.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_load(
    path: *const c_char,
    out: *mut *mut DpokModel,
    out_schedule: *mut *mut DpokSchedule,
) -> DpokStatus {
    guard(|| {
        let path = PathBuf::from(utf8(path, "path")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let (snapshot, spec) = load_checkpoint(&path)?;
        let schedule = match spec {
            Some(spec) => Some(DpokSchedule {
                schedule: spec.build()?,
                spec,
            }),
            None => None,
        };
        if !out_schedule.is_null() {
            *out_schedule = schedule.map_or(std::ptr::null_mut(), |s| Box::into_raw(Box::new(s)));
        }
        *out = Box::into_raw(Box::new(DpokModel { snapshot }));
        Ok(())
    })
}

/// Writes a checkpoint; `schedule` may be null.
///
/// # Safety
/// `model` must be live; `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_save(
    model: *const DpokModel,
    schedule: *const DpokSchedule,
    path: *const c_char,
) -> DpokStatus {
    guard(|| {
        let model = deref(model, "model")?;
        let path = PathBuf::from(utf8(path, "path")?);
        let spec = schedule.as_ref().map(|s| &s.spec);
        save_checkpoint(&path, &model.snapshot, spec)?;
        Ok(())
    })
}

/// Number of parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_num_params(model: *const DpokModel) -> usize {
    model.as_ref().map_or(0, |m| m.snapshot.params.len())
}

/// Sample dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_dim(model: *const DpokModel) -> usize {
    model.as_ref().map_or(0, |m| m.snapshot.arch.dim())
}

/// Draws one sample for `prompt` into `out_x0[0..dim]`.
///
/// # Safety
/// Handles must be live; `out_x0` must have room for `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_sample(
    model: *const DpokModel,
    schedule: *const DpokSchedule,
    prompt: usize,
    seed: u64,
    out_x0: *mut f64,
    dim: usize,
) -> DpokStatus {
    guard(|| {
        let model = &deref(model, "model")?.snapshot;
        let schedule = &deref(schedule, "schedule")?.schedule;
        if out_x0.is_null() {
            return Err(null("out_x0"));
        }
        if dim != model.arch.dim() {
            return Err(invalid(format!("dim {dim} does not match model dimension {}", model.arch.dim())));
        }
        if prompt >= model.arch.prompt_count() {
            return Err(Error::UnknownPrompt(prompt).into());
        }
        if schedule.horizon != model.arch.horizon() {
            return Err(invalid("schedule horizon does not match the model"));
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let traj = sample_trajectory(model.view(), schedule, prompt, &mut rng)?;
        std::slice::from_raw_parts_mut(out_x0, dim).copy_from_slice(traj.x0());
        Ok(())
    })
}

/// Monte Carlo evaluation over `n` rollouts. KL is measured against
/// `anchor`, or against the model itself when `anchor` is null.
///
/// # Safety
/// Handles must be live (`anchor` may be null); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_evaluate(
    model: *const DpokModel,
    anchor: *const DpokModel,
    schedule: *const DpokSchedule,
    scenario: *const DpokScenario,
    n: usize,
    seed: u64,
    out: *mut DpokMetrics,
) -> DpokStatus {
    guard(|| {
        let model = &deref(model, "model")?.snapshot;
        let anchor = anchor.as_ref().map_or(model, |a| &a.snapshot);
        let schedule = &deref(schedule, "schedule")?.schedule;
        let scenario = &deref(scenario, "scenario")?.scenario;
        if out.is_null() {
            return Err(null("out"));
        }
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        let m = evaluate_against(model.view(), anchor.view(), schedule, scenario, n, seed)?;
        *out = DpokMetrics {
            mean_reward: m.mean_reward,
            reward_se: m.reward_se,
            mean_quality: m.mean_quality,
            kl_to_pretrained: m.kl_to_pretrained,
            target_mass: m.target_mass,
        };
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dpok_model_free(model: *mut DpokModel) {
    free(model)
}

/// Runs the experiment described by a JSON config file, writing its
/// artifacts to the configured output directory.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dpok_run_config(config_path: *const c_char) -> DpokStatus {
    guard(|| {
        let path = PathBuf::from(utf8(config_path, "config_path")?);
        let config = ExperimentConfig::from_json_file(&path)?;
        run_experiment(&config)?;
        Ok(())
    })
}

/// Runs the numerical verification suite; `out_passed` receives whether
/// every check passed.
///
/// # Safety
/// `out_passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dpok_verify(seed: u64, out_passed: *mut bool) -> DpokStatus {
    guard(|| {
        if out_passed.is_null() {
            return Err(null("out_passed"));
        }
        *out_passed = verify_all(seed)?.pass;
        Ok(())
    })
}
