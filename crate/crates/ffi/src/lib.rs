//! C ABI over the policies and the navigation environment.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or
//! `*_load` and released with the matching `*_free`. Every fallible call
//! returns a [`SaintStatus`]; on failure [`saint_last_error`] describes the
//! cause. Sub-actions are passed as `uint32_t` arrays, states and
//! observations as `double` arrays, each with an explicit length.
//!
//! Handles are not synchronized. A handle may move between threads but
//! must not be used from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use rand::SeedableRng;
use saint::cone::{oracle_optimal_return, ConeConfig, ConeInstance, Episode};
use saint::harness::{train_config_from_kv, KvConfig};
use saint::policy::{
    load_policy, save_policy, ArConfig, AutoregressivePolicy, FactorizedConfig, FactorizedPolicy,
    FlatConfig, FlatPolicy, Policy, PolicyRng, SaintConfig, SaintPolicy,
};
use saint::rl::train_online;
use saint::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaintStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Refused = 4,
    Io = 5,
    Numeric = 6,
    Parse = 7,
    Contract = 8,
    Panic = 9,
}

/// Policy class selector for [`saint_policy_new`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaintPolicyClass {
    Saint = 0,
    Factorized = 1,
    Autoregressive = 2,
    Flat = 3,
}

/// Opaque environment: a built instance plus its running episode.
pub struct SaintEnv {
    // Declared first so it drops before the instance it borrows.
    episode: Episode<'static>,
    instance: Box<ConeInstance>,
}

/// Opaque policy of any class.
pub struct SaintPolicyHandle {
    inner: Box<dyn Policy>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> SaintStatus {
    match e {
        Error::Config(_) => SaintStatus::Config,
        Error::Parse { .. } => SaintStatus::Parse,
        Error::Refused(_) => SaintStatus::Refused,
        Error::Io { .. } => SaintStatus::Io,
        Error::NonFinite(_) | Error::Determinism { .. } => SaintStatus::Numeric,
        Error::Dimension { .. } | Error::Contract(_) => SaintStatus::Contract,
    }
}

struct Fail(SaintStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaintStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaintStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SaintStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SaintStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| {
        Fail(
            SaintStatus::InvalidArgument,
            format!("{what} is not UTF-8: {e}"),
        )
    })
}

fn copy_into(dst: &mut [f64], src: &[f64], what: &str) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(Fail(
            SaintStatus::InvalidArgument,
            format!("{what} buffer holds {}, need {}", dst.len(), src.len()),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

fn to_action(a: &[u32]) -> Vec<usize> {
    a.iter().map(|&x| x as usize).collect()
}

fn write_action(dst: &mut [u32], src: &[usize]) -> Result<(), Fail> {
    if dst.len() != src.len() {
        return Err(Fail(
            SaintStatus::InvalidArgument,
            format!("action buffer holds {}, need {}", dst.len(), src.len()),
        ));
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = s as u32;
    }
    Ok(())
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn saint_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds an environment with `dims` axes of `size` positions. `discount`
/// only affects [`saint_env_oracle`].
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn saint_env_new(
    dims: usize,
    size: usize,
    pit_fraction: f64,
    seed: u64,
    discount: f64,
    out_env: *mut *mut SaintEnv,
) -> SaintStatus {
    guard(|| {
        let slot = out(out_env, "out_env")?;
        let mut cfg = ConeConfig::new(dims, size, pit_fraction, seed);
        cfg.discount = discount;
        let instance = Box::new(ConeInstance::build(cfg)?);
        // SAFETY: the box's heap address is stable and outlives `episode`
        // (see the field order of `SaintEnv`).
        let borrowed: &'static ConeInstance = &*(instance.as_ref() as *const ConeInstance);
        let mut episode = Episode::new(borrowed);
        episode.reset();
        *slot = Box::into_raw(Box::new(SaintEnv { instance, episode }));
        Ok(())
    })
}

/// # Safety
/// `env` must come from [`saint_env_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saint_env_free(env: *mut SaintEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Observation width (the number of axes).
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn saint_env_state_dim(env: *const SaintEnv) -> usize {
    env.as_ref().map_or(0, |e| e.instance.config().dims)
}

/// Number of binary sub-actions per step.
///
/// # Safety
/// `env` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn saint_env_num_sub_actions(env: *const SaintEnv) -> usize {
    env.as_ref()
        .map_or(0, |e| e.instance.config().num_sub_actions())
}

/// Starts a new episode and writes its first observation.
///
/// # Safety
/// `env` must be a live handle; `obs` must point to `obs_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn saint_env_reset(
    env: *mut SaintEnv,
    obs: *mut f64,
    obs_len: usize,
) -> SaintStatus {
    guard(|| {
        let env = out(env, "env")?;
        let o = env.episode.reset();
        copy_into(slice_mut(obs, obs_len, "obs")?, &o, "observation")
    })
}

/// Applies one joint action. `done` is set to 1 when the episode ended.
///
/// # Safety
/// `env` must be a live handle; `action` must point to `action_len`
/// values, `obs` to `obs_len` doubles; `reward` and `done` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn saint_env_step(
    env: *mut SaintEnv,
    action: *const u32,
    action_len: usize,
    obs: *mut f64,
    obs_len: usize,
    reward: *mut f64,
    done: *mut i32,
) -> SaintStatus {
    guard(|| {
        let env = out(env, "env")?;
        let a = to_action(slice(action, action_len, "action")?);
        let obs = slice_mut(obs, obs_len, "obs")?;
        let reward = out(reward, "reward")?;
        let done = out(done, "done")?;
        let step = env.episode.step(&a)?;
        copy_into(obs, &step.observation, "observation")?;
        *reward = step.reward;
        *done = i32::from(step.done);
        Ok(())
    })
}

/// Optimal expected return from the start under the environment's
/// discount.
///
/// # Safety
/// `env` must be a live handle; `value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saint_env_oracle(env: *const SaintEnv, value: *mut f64) -> SaintStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        *out(value, "value")? = oracle_optimal_return(&env.instance)?;
        Ok(())
    })
}

/// Creates a policy with default widths for `cardinalities` and
/// `state_dim`. Baselines use a trunk of `hidden` units; SAINT ignores it.
///
/// # Safety
/// `cardinalities` must point to `n` values; `out_policy` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_new(
    class: SaintPolicyClass,
    cardinalities: *const u32,
    n: usize,
    state_dim: usize,
    hidden: usize,
    seed: u64,
    out_policy: *mut *mut SaintPolicyHandle,
) -> SaintStatus {
    guard(|| {
        let slot = out(out_policy, "out_policy")?;
        let cards = to_action(slice(cardinalities, n, "cardinalities")?);
        let inner: Box<dyn Policy> = match class {
            SaintPolicyClass::Saint => {
                Box::new(SaintPolicy::init(SaintConfig::new(cards, state_dim), seed)?)
            }
            SaintPolicyClass::Factorized => Box::new(FactorizedPolicy::init(
                FactorizedConfig {
                    cardinalities: cards,
                    state_dim,
                    hidden,
                },
                seed,
            )?),
            SaintPolicyClass::Autoregressive => Box::new(AutoregressivePolicy::init(
                ArConfig {
                    cardinalities: cards,
                    state_dim,
                    hidden,
                },
                seed,
            )?),
            SaintPolicyClass::Flat => Box::new(FlatPolicy::init(
                FlatConfig::new(cards, state_dim, hidden),
                seed,
            )?),
        };
        *slot = Box::into_raw(Box::new(SaintPolicyHandle { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by [`saint_policy_save`] or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out_policy` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_load(
    path: *const c_char,
    out_policy: *mut *mut SaintPolicyHandle,
) -> SaintStatus {
    guard(|| {
        let slot = out(out_policy, "out_policy")?;
        let inner = load_policy(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(SaintPolicyHandle { inner }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_save(
    policy: *const SaintPolicyHandle,
    path: *const c_char,
) -> SaintStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        save_policy(p.inner.as_ref(), Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `policy` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_free(policy: *mut SaintPolicyHandle) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of trainable scalars, 0 for a null handle.
///
/// # Safety
/// `policy` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_num_params(policy: *const SaintPolicyHandle) -> usize {
    policy.as_ref().map_or(0, |p| p.inner.num_params())
}

/// # Safety
/// Buffers must hold the stated lengths; `log_prob` must be writable.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_log_prob(
    policy: *const SaintPolicyHandle,
    state: *const f64,
    state_len: usize,
    action: *const u32,
    action_len: usize,
    log_prob: *mut f64,
) -> SaintStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let s = slice(state, state_len, "state")?;
        let a = to_action(slice(action, action_len, "action")?);
        *out(log_prob, "log_prob")? = p.inner.log_prob(s, &a)?;
        Ok(())
    })
}

/// Samples a joint action with a generator seeded by `seed`. `log_prob`
/// may be null.
///
/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_sample(
    policy: *const SaintPolicyHandle,
    state: *const f64,
    state_len: usize,
    seed: u64,
    action: *mut u32,
    action_len: usize,
    log_prob: *mut f64,
) -> SaintStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let s = slice(state, state_len, "state")?;
        let mut rng = PolicyRng::seed_from_u64(seed);
        let (a, lp) = p.inner.sample(s, &mut rng)?;
        write_action(slice_mut(action, action_len, "action")?, &a)?;
        if let Some(l) = log_prob.as_mut() {
            *l = lp;
        }
        Ok(())
    })
}

/// # Safety
/// Buffers must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn saint_policy_greedy(
    policy: *const SaintPolicyHandle,
    state: *const f64,
    state_len: usize,
    action: *mut u32,
    action_len: usize,
) -> SaintStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        let a = p.inner.greedy(slice(state, state_len, "state")?)?;
        write_action(slice_mut(action, action_len, "action")?, &a)
    })
}

/// Trains `policy` online on the environment's layout. `train_config`
/// holds `train.key = value` lines (may be null or empty for defaults);
/// `seed` seeds sampling and the critic. Writes the mean return over the
/// last tenth of episodes.
///
/// # Safety
/// Handles must be live; `train_config` null or NUL-terminated;
/// `final_mean` writable.
#[no_mangle]
pub unsafe extern "C" fn saint_train(
    env: *const SaintEnv,
    policy: *mut SaintPolicyHandle,
    train_config: *const c_char,
    seed: u64,
    final_mean: *mut f64,
) -> SaintStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        let p = out(policy, "policy")?;
        let result = out(final_mean, "final_mean")?;
        let kv = if train_config.is_null() {
            KvConfig::default()
        } else {
            KvConfig::parse(text(train_config, "train_config")?)?
        };
        if let Some(k) = kv.keys().find(|k| !k.starts_with("train.")) {
            return Err(Fail(SaintStatus::Config, format!("unknown field {k}")));
        }
        let mut cfg = train_config_from_kv(&kv)?;
        cfg.seed = seed;
        let outcome = train_online(&env.instance, p.inner.as_mut(), &cfg, &mut |_| Ok(()))?;
        *result = outcome.final_window_mean(0.1).unwrap_or(f64::NAN);
        Ok(())
    })
}
