//! C ABI over `grpo-lab`.
//!
//! Every fallible function returns a [`GrpoStatus`]; on failure the message
//! is available from [`grpo_last_error_message`] on the same thread.
//! Objects cross the boundary as opaque handles that the caller releases
//! with the matching `*_free` function. Panics never unwind into C: they are
//! caught and reported as [`GrpoStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use grpo_lab::advantage::{self, LimitMode};
use grpo_lab::config::{RunConfig, TaskConfig, TaskFamily};
use grpo_lab::policy::PolicyParams;
use grpo_lab::tasks::{self, TaskSpec};
use grpo_lab::trainer::{self, LrScaling, RunRecord};
use grpo_lab::verify;
use grpo_lab::LabError;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrpoStatus {
    Ok = 0,
    InvalidArgument = 1,
    DimensionMismatch = 2,
    Unsupported = 3,
    NonFinite = 4,
    Config = 5,
    Io = 6,
    NullPointer = 7,
    Panic = 8,
}

/// Limit evaluated by [`grpo_advantage_limit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrpoLimitMode {
    LargeGroup = 0,
    Pairwise = 1,
}

/// Softmax policy over `(prompt, position, token)` logits.
pub struct GrpoPolicy(PolicyParams);

/// Verifiable-reward task.
pub struct GrpoTask(TaskSpec);

/// Finished training run: per-step metrics and final parameters.
pub struct GrpoRun {
    record: RunRecord,
    params: PolicyParams,
}

/// Metrics of one training step.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GrpoStepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub mean_reward: f64,
    pub p_hat_mean: f64,
    pub degenerate_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub cumulative_rollouts: u64,
    pub exact_success: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(GrpoStatus, String);

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        let status = match &e {
            LabError::InvalidArgument(_) => GrpoStatus::InvalidArgument,
            LabError::DimensionMismatch(_) => GrpoStatus::DimensionMismatch,
            LabError::Unsupported(_) => GrpoStatus::Unsupported,
            LabError::NonFiniteRatio { .. } | LabError::NonFiniteGradient { .. } => {
                GrpoStatus::NonFinite
            }
            LabError::Config { .. } => GrpoStatus::Config,
            LabError::Io(_) | LabError::Csv(_) => GrpoStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GrpoStatus {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|payload| {
        let msg = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "unknown panic".to_string());
        Err(Failure(GrpoStatus::Panic, format!("panic: {msg}")))
    });
    match outcome {
        Ok(()) => {
            set_last_error("");
            GrpoStatus::Ok
        }
        Err(Failure(status, msg)) => {
            set_last_error(&msg);
            status
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(GrpoStatus::NullPointer, format!("{what} is null"))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn in_ref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn grpo_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn grpo_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Normalizes `len` rewards into `out` (also of length `len`).
///
/// # Safety
/// `rewards` and `out` must point to `len` valid `double`s.
#[no_mangle]
pub unsafe extern "C" fn grpo_group_normalize(
    rewards: *const f64,
    len: usize,
    eps: f64,
    out: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let r = in_slice(rewards, len, "rewards")?;
        let o = out_slice(out, len, "out")?;
        let adv = advantage::group_normalize(r, eps)?;
        o.copy_from_slice(&adv.0);
        Ok(())
    })
}

/// # Safety
/// `out1` and `out2` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn grpo_pair_advantage(
    r1: f64,
    r2: f64,
    out1: *mut f64,
    out2: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let (a, b) = advantage::pair_advantage(r1, r2);
        *out_ref(out1, "out1")? = a;
        *out_ref(out2, "out2")? = b;
        Ok(())
    })
}

/// `mode` is a [`GrpoLimitMode`] value.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn grpo_advantage_limit(
    x: f64,
    p: f64,
    mode: u32,
    out: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let mode = match mode {
            m if m == GrpoLimitMode::LargeGroup as u32 => LimitMode::LargeGroup,
            m if m == GrpoLimitMode::Pairwise as u32 => LimitMode::Pairwise,
            m => {
                return Err(Failure(
                    GrpoStatus::InvalidArgument,
                    format!("unknown limit mode {m}"),
                ))
            }
        };
        *out_ref(out, "out")? = advantage::theoretical_advantage_limit(x, p, mode)?;
        Ok(())
    })
}

/// Learning rate for `q` prompts per step given `base_lr` tuned at `q0`;
/// `linear = false` returns `base_lr` unchanged.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn grpo_lr_for_batch(
    base_lr: f64,
    q0: usize,
    q: usize,
    linear: bool,
    out: *mut f64,
) -> GrpoStatus {
    guard(|| {
        if q0 == 0 {
            return Err(Failure(
                GrpoStatus::InvalidArgument,
                "q0 must be positive".into(),
            ));
        }
        let scaling = if linear {
            LrScaling::Linear
        } else {
            LrScaling::None
        };
        *out_ref(out, "out")? = trainer::lr_for_batch(base_lr, q0, q, scaling);
        Ok(())
    })
}

/// Probability of at least one success in `2m` draws at `schedule[0]`
/// (`p_2m`) and in `m` pairs along the schedule (`p_mx2`).
///
/// # Safety
/// `schedule` must point to `len` valid `double`s; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn grpo_hard_question_probabilities(
    schedule: *const f64,
    len: usize,
    p_2m: *mut f64,
    p_mx2: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let s = in_slice(schedule, len, "schedule")?;
        let (a, b) = verify::hard_question_probabilities(s)?;
        *out_ref(p_2m, "p_2m")? = a;
        *out_ref(p_mx2, "p_mx2")? = b;
        Ok(())
    })
}

fn new_handle<T>(value: T, out: *mut *mut T) -> Result<(), Failure> {
    // SAFETY: caller-provided out-pointer, checked for null.
    let slot = unsafe { out_ref(out, "out") }?;
    *slot = Box::into_raw(Box::new(value));
    Ok(())
}

/// Needle task: one correct sequence per prompt, drawn from `seed`.
///
/// # Safety
/// `out` must be valid for writes; free the result with [`grpo_task_free`].
#[no_mangle]
pub unsafe extern "C" fn grpo_task_new_needle(
    vocab_size: usize,
    seq_len: usize,
    num_prompts: usize,
    seed: u64,
    out: *mut *mut GrpoTask,
) -> GrpoStatus {
    guard(|| {
        let task = TaskConfig {
            family: TaskFamily::Needle,
            vocab_size,
            seq_len,
            num_prompts,
            seed,
            ..TaskConfig::default()
        }
        .build()?;
        new_handle(GrpoTask(task), out)
    })
}

/// k-of-V task: `k` correct tokens at every position.
///
/// # Safety
/// `out` must be valid for writes; free the result with [`grpo_task_free`].
#[no_mangle]
pub unsafe extern "C" fn grpo_task_new_kofv(
    vocab_size: usize,
    seq_len: usize,
    k: usize,
    num_prompts: usize,
    out: *mut *mut GrpoTask,
) -> GrpoStatus {
    guard(|| {
        let task = tasks::make_kofv_task(vocab_size, seq_len, k, num_prompts)?;
        new_handle(GrpoTask(task), out)
    })
}

/// # Safety
/// `task` must be null or a handle from a `grpo_task_new_*` call that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn grpo_task_free(task: *mut GrpoTask) {
    if !task.is_null() {
        drop(Box::from_raw(task));
    }
}

/// # Safety
/// `out` must be valid for writes; free the result with [`grpo_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn grpo_policy_new_uniform(
    num_prompts: usize,
    seq_len: usize,
    vocab_size: usize,
    out: *mut *mut GrpoPolicy,
) -> GrpoStatus {
    guard(|| {
        let p = PolicyParams::uniform(num_prompts, seq_len, vocab_size)?;
        new_handle(GrpoPolicy(p), out)
    })
}

/// Copies `len = num_prompts * seq_len * vocab_size` logits laid out as
/// `[prompt][position][token]`.
///
/// # Safety
/// `logits` must point to `len` valid `double`s and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn grpo_policy_from_logits(
    num_prompts: usize,
    seq_len: usize,
    vocab_size: usize,
    logits: *const f64,
    len: usize,
    out: *mut *mut GrpoPolicy,
) -> GrpoStatus {
    guard(|| {
        let l = in_slice(logits, len, "logits")?;
        let p = PolicyParams::from_logits(num_prompts, seq_len, vocab_size, l.to_vec())?;
        new_handle(GrpoPolicy(p), out)
    })
}

/// # Safety
/// `policy` must be null or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn grpo_policy_free(policy: *mut GrpoPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Number of logits, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live policy handle.
#[no_mangle]
pub unsafe extern "C" fn grpo_policy_dim(policy: *const GrpoPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.0.dim())
}

/// Copies the logits into `out`, which must hold exactly `dim` values.
///
/// # Safety
/// `policy` must be a live handle and `out` point to `len` writable `double`s.
#[no_mangle]
pub unsafe extern "C" fn grpo_policy_logits(
    policy: *const GrpoPolicy,
    out: *mut f64,
    len: usize,
) -> GrpoStatus {
    guard(|| {
        let p = &in_ref(policy, "policy")?.0;
        if len != p.dim() {
            return Err(Failure(
                GrpoStatus::DimensionMismatch,
                format!("buffer holds {len} values, policy has {}", p.dim()),
            ));
        }
        out_slice(out, len, "out")?.copy_from_slice(p.logits());
        Ok(())
    })
}

/// Exact probability that one rollout on `prompt` is correct.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grpo_success_probability(
    task: *const GrpoTask,
    policy: *const GrpoPolicy,
    prompt: usize,
    out: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let t = &in_ref(task, "task")?.0;
        let p = &in_ref(policy, "policy")?.0;
        *out_ref(out, "out")? = tasks::success_probability(t, p, prompt)?;
        Ok(())
    })
}

/// Exact success probability averaged over prompts.
///
/// # Safety
/// Handles must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grpo_mean_success_probability(
    task: *const GrpoTask,
    policy: *const GrpoPolicy,
    out: *mut f64,
) -> GrpoStatus {
    guard(|| {
        let t = &in_ref(task, "task")?.0;
        let p = &in_ref(policy, "policy")?.0;
        *out_ref(out, "out")? = tasks::mean_success_probability(t, p)?;
        Ok(())
    })
}

/// Trains the configuration given as INI text (the format of the command
/// line tool's `--config` files). Nothing is written to disk.
///
/// # Safety
/// `config_text` must be a NUL-terminated UTF-8 string and `out` writable;
/// free the result with [`grpo_run_free`].
#[no_mangle]
pub unsafe extern "C" fn grpo_run_train(
    config_text: *const c_char,
    out: *mut *mut GrpoRun,
) -> GrpoStatus {
    guard(|| {
        if config_text.is_null() {
            return Err(null("config_text"));
        }
        let text = CStr::from_ptr(config_text).to_str().map_err(|_| {
            Failure(
                GrpoStatus::InvalidArgument,
                "config text is not UTF-8".into(),
            )
        })?;
        let config = RunConfig::from_ini_str(text)?;
        let task = config.task.build()?;
        let outcome = trainer::run_training(&task, &config.trainer, &config.objective)?;
        new_handle(
            GrpoRun {
                record: outcome.record,
                params: outcome.params,
            },
            out,
        )
    })
}

/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn grpo_run_free(run: *mut GrpoRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of recorded steps, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn grpo_run_num_steps(run: *const GrpoRun) -> usize {
    run.as_ref().map_or(0, |r| r.record.rows.len())
}

/// Total rollouts generated, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn grpo_run_total_rollouts(run: *const GrpoRun) -> u64 {
    run.as_ref().map_or(0, |r| r.record.total_rollouts())
}

/// Metrics of step `index` (0-based).
///
/// # Safety
/// `run` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn grpo_run_step_metrics(
    run: *const GrpoRun,
    index: usize,
    out: *mut GrpoStepMetrics,
) -> GrpoStatus {
    guard(|| {
        let r = in_ref(run, "run")?;
        let row = r.record.rows.get(index).ok_or_else(|| {
            Failure(
                GrpoStatus::InvalidArgument,
                format!(
                    "step index {index} out of range ({} steps)",
                    r.record.rows.len()
                ),
            )
        })?;
        *out_ref(out, "out")? = GrpoStepMetrics {
            step: row.step as u64,
            epoch: row.epoch as u64,
            mean_reward: row.mean_reward,
            p_hat_mean: row.p_hat_mean,
            degenerate_fraction: row.degenerate_fraction,
            grad_norm: row.grad_norm,
            lr: row.lr,
            cumulative_rollouts: row.cumulative_rollouts,
            exact_success: row.exact_success,
        };
        Ok(())
    })
}

/// Copies the final parameters into a new policy handle.
///
/// # Safety
/// `run` must be a live handle and `out` writable; free the result with
/// [`grpo_policy_free`].
#[no_mangle]
pub unsafe extern "C" fn grpo_run_policy(
    run: *const GrpoRun,
    out: *mut *mut GrpoPolicy,
) -> GrpoStatus {
    guard(|| {
        let r = in_ref(run, "run")?;
        new_handle(GrpoPolicy(r.params.clone()), out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ptr;

    #[test]
    fn panics_become_status_codes() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, GrpoStatus::Panic);
        let msg = unsafe { CStr::from_ptr(grpo_last_error_message()) };
        assert_eq!(msg.to_str().unwrap(), "panic: boom");
        assert_eq!(guard(|| Ok(())), GrpoStatus::Ok);
        let msg = unsafe { CStr::from_ptr(grpo_last_error_message()) };
        assert!(msg.to_bytes().is_empty());
    }

    #[test]
    fn null_outputs_are_rejected() {
        let s = unsafe { grpo_pair_advantage(1.0, 0.0, ptr::null_mut(), ptr::null_mut()) };
        assert_eq!(s, GrpoStatus::NullPointer);
    }
}
