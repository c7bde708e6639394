//! C ABI for the duodec engine.
//!
//! Models, profiles and results are opaque heap objects owned by the caller
//! and released with their `_free` function. Every fallible call returns a
//! [`DuodecStatus`]; on failure [`duodec_last_error`] describes what went
//! wrong on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use duodec::engine::{calibrated_budget, CALIBRATION_TRIALS, DEFAULT_BUDGET_CAP};
use duodec::simclock::to_ms;
use duodec::{
    generate, BudgetPolicy, Clock, DeviceProfile, EngineConfig, EngineError, Executor, GenerationResult, Mode,
    ModelSpec, Token, WallClock,
};

pub const DUODEC_MODE_VANILLA: u32 = 0;
pub const DUODEC_MODE_SPS: u32 = 1;
pub const DUODEC_MODE_DUO: u32 = 2;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DuodecStatus {
    Ok = 0,
    NullArg = 1,
    /// Invalid configuration or arguments.
    Config = 2,
    /// A model or profile could not be read or parsed.
    Load = 3,
    Internal = 5,
}

pub struct DuodecModel(ModelSpec);

pub struct DuodecProfile(DeviceProfile);

pub struct DuodecResult(GenerationResult);

/// Generation settings. Start from [`duodec_config_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DuodecConfig {
    /// One of the `DUODEC_MODE_*` constants.
    pub mode: u32,
    /// Draft budget; 0 calibrates it on the run's clock.
    pub gamma: usize,
    pub max_sequences: usize,
    pub max_new_tokens: usize,
    /// Values <= 0 keep each model's own temperature.
    pub temperature: f64,
    pub draft_seed: u64,
    pub verify_seed: u64,
    /// Run both roles on the calling thread.
    pub inline_executor: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let c = CString::new(message.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: DuodecStatus, message: impl Into<String>) -> DuodecStatus {
    set_error(message);
    status
}

/// Runs `f`, turning panics into [`DuodecStatus::Internal`].
fn guard(f: impl FnOnce() -> DuodecStatus) -> DuodecStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(DuodecStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn engine_status(e: EngineError) -> DuodecStatus {
    let status = match e {
        EngineError::WorkerFailed => DuodecStatus::Internal,
        _ => DuodecStatus::Config,
    };
    fail(status, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, DuodecStatus> {
    if p.is_null() {
        return Err(fail(DuodecStatus::NullArg, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(DuodecStatus::Config, "string argument is not UTF-8"))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

macro_rules! non_null {
    ($($p:expr),+) => {
        if $($p.is_null())||+ {
            return fail(DuodecStatus::NullArg, "null pointer argument");
        }
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn duodec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn duodec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duodec_model_load(path: *const c_char, out: *mut *mut DuodecModel) -> DuodecStatus {
    guard(|| {
        non_null!(out);
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match duodec::load_model(path) {
            Ok(m) => {
                put(out, DuodecModel(m));
                DuodecStatus::Ok
            }
            Err(e) => fail(DuodecStatus::Load, format!("{path}: {e}")),
        }
    })
}

/// Parses a model from text in the model file format.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duodec_model_parse(text: *const c_char, out: *mut *mut DuodecModel) -> DuodecStatus {
    guard(|| {
        non_null!(out);
        let text = match str_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match ModelSpec::parse(text) {
            Ok(m) => {
                put(out, DuodecModel(m));
                DuodecStatus::Ok
            }
            Err(e) => fail(DuodecStatus::Load, e.to_string()),
        }
    })
}

/// # Safety
/// `model` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_model_vocab_size(model: *const DuodecModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.vocab_size())
}

/// # Safety
/// `model` must come from this library and not be used afterwards. NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn duodec_model_free(model: *mut DuodecModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a device profile file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duodec_profile_load(path: *const c_char, out: *mut *mut DuodecProfile) -> DuodecStatus {
    guard(|| {
        non_null!(out);
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match DeviceProfile::load(path) {
            Ok(p) => {
                put(out, DuodecProfile(p));
                DuodecStatus::Ok
            }
            Err(e) => fail(DuodecStatus::Load, format!("{path}: {e}")),
        }
    })
}

/// Built-in profile by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duodec_profile_preset(name: *const c_char, out: *mut *mut DuodecProfile) -> DuodecStatus {
    guard(|| {
        non_null!(out);
        let name = match str_arg(name) {
            Ok(n) => n,
            Err(s) => return s,
        };
        match DeviceProfile::preset(name) {
            Some(p) => {
                put(out, DuodecProfile(p));
                DuodecStatus::Ok
            }
            None => fail(DuodecStatus::Config, format!("unknown preset `{name}`")),
        }
    })
}

/// Profile from latencies in milliseconds.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn duodec_profile_new(
    draft_per_token_ms: f64,
    target_base_ms: f64,
    target_slope_ms: f64,
    comm_ms: f64,
    out: *mut *mut DuodecProfile,
) -> DuodecStatus {
    guard(|| {
        non_null!(out);
        match DeviceProfile::new(draft_per_token_ms, target_base_ms, target_slope_ms, comm_ms) {
            Ok(p) => {
                put(out, DuodecProfile(p));
                DuodecStatus::Ok
            }
            Err(e) => fail(DuodecStatus::Config, e.to_string()),
        }
    })
}

/// # Safety
/// `profile` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn duodec_profile_free(profile: *mut DuodecProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

#[no_mangle]
pub extern "C" fn duodec_config_default() -> DuodecConfig {
    let d = EngineConfig::default();
    DuodecConfig {
        mode: DUODEC_MODE_DUO,
        gamma: match d.budget {
            BudgetPolicy::Fixed(g) => g,
            BudgetPolicy::Calibrated => 0,
        },
        max_sequences: d.max_sequences,
        max_new_tokens: d.max_new_tokens,
        temperature: 0.0,
        draft_seed: d.draft_seed,
        verify_seed: d.verify_seed,
        inline_executor: false,
    }
}

fn engine_config(c: &DuodecConfig) -> Result<EngineConfig, DuodecStatus> {
    let mode = match c.mode {
        DUODEC_MODE_VANILLA => Mode::Vanilla,
        DUODEC_MODE_SPS => Mode::Sps,
        DUODEC_MODE_DUO => Mode::Duo,
        m => return Err(fail(DuodecStatus::Config, format!("unknown mode {m}"))),
    };
    Ok(EngineConfig {
        mode,
        budget: if c.gamma == 0 {
            BudgetPolicy::Calibrated
        } else {
            BudgetPolicy::Fixed(c.gamma)
        },
        max_sequences: c.max_sequences,
        max_new_tokens: c.max_new_tokens,
        temperature: (c.temperature > 0.0).then_some(c.temperature),
        draft_seed: c.draft_seed,
        verify_seed: c.verify_seed,
        budget_cap: DEFAULT_BUDGET_CAP,
        executor: if c.inline_executor {
            Executor::Inline
        } else {
            Executor::Threaded
        },
        jitter: None,
    })
}

/// Generates tokens after `prompt`.
///
/// `draft` may be NULL in vanilla mode. `profile` NULL bills measured wall
/// time. `prompt` may be NULL when `prompt_len` is 0.
///
/// # Safety
/// Handles must come from this library; `prompt` must point to `prompt_len`
/// readable ids; `config` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn duodec_generate(
    target: *const DuodecModel,
    draft: *const DuodecModel,
    profile: *const DuodecProfile,
    prompt: *const u32,
    prompt_len: usize,
    config: *const DuodecConfig,
    out: *mut *mut DuodecResult,
) -> DuodecStatus {
    guard(|| {
        non_null!(target, config, out);
        if prompt.is_null() && prompt_len > 0 {
            return fail(DuodecStatus::NullArg, "null prompt with non-zero length");
        }
        let prompt: Vec<Token> = if prompt_len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(prompt, prompt_len).iter().map(|&t| Token(t)).collect()
        };
        let config = match engine_config(&*config) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let clock: &dyn Clock = match profile.as_ref() {
            Some(p) => &p.0,
            None => &WallClock,
        };
        match generate(&(*target).0, draft.as_ref().map(|d| &d.0), &prompt, &config, clock) {
            Ok(r) => {
                put(out, DuodecResult(r));
                DuodecStatus::Ok
            }
            Err(e) => engine_status(e),
        }
    })
}

/// Number of generated tokens.
///
/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_len(result: *const DuodecResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.tokens.len())
}

/// Copies up to `cap` token ids into `buf` and returns the total count.
///
/// # Safety
/// `buf` must have room for `cap` ids, or be NULL with `cap` 0.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_tokens(result: *const DuodecResult, buf: *mut u32, cap: usize) -> usize {
    let Some(r) = result.as_ref() else { return 0 };
    if !buf.is_null() {
        for (i, t) in r.0.tokens.iter().take(cap).enumerate() {
            *buf.add(i) = t.0;
        }
    }
    r.0.tokens.len()
}

/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_iterations(result: *const DuodecResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.iterations.len())
}

/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_ttft_ms(result: *const DuodecResult) -> f64 {
    result.as_ref().map_or(0.0, |r| to_ms(r.0.ttft))
}

/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_total_ms(result: *const DuodecResult) -> f64 {
    result.as_ref().map_or(0.0, |r| to_ms(r.0.total_time))
}

/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_tps(result: *const DuodecResult) -> f64 {
    result.as_ref().map_or(0.0, |r| r.0.tps)
}

/// The whole result as JSON. Free with [`duodec_string_free`].
///
/// # Safety
/// `result` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_to_json(result: *const DuodecResult) -> *mut c_char {
    let Some(r) = result.as_ref() else {
        return ptr::null_mut();
    };
    serde_json::to_string(&r.0)
        .ok()
        .and_then(|s| CString::new(s).ok())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// # Safety
/// `result` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn duodec_result_free(result: *mut DuodecResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn duodec_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Measures the cost coefficient and picks a budget. `trials` 0 uses the
/// default; `profile` NULL measures wall time.
///
/// # Safety
/// Handles must come from this library; `out_c` and `out_gamma` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn duodec_calibrate(
    target: *const DuodecModel,
    draft: *const DuodecModel,
    profile: *const DuodecProfile,
    trials: usize,
    out_c: *mut f64,
    out_gamma: *mut usize,
) -> DuodecStatus {
    guard(|| {
        non_null!(target, draft, out_c, out_gamma);
        let clock: &dyn Clock = match profile.as_ref() {
            Some(p) => &p.0,
            None => &WallClock,
        };
        let trials = if trials == 0 { CALIBRATION_TRIALS } else { trials };
        match calibrated_budget(&(*target).0, &(*draft).0, clock, trials, DEFAULT_BUDGET_CAP) {
            Ok(cal) => {
                *out_c = cal.cost_coefficient;
                *out_gamma = cal.gamma;
                DuodecStatus::Ok
            }
            Err(e) => engine_status(e),
        }
    })
}
