//! C ABI over `vcrl-core`.
//!
//! Conventions:
//! - every fallible function returns a [`VcrlStatus`]; results go through out
//!   pointers, which are written only on success;
//! - handles ([`VcrlBank`], [`VcrlTrainer`]) are opaque, created by `*_new`
//!   and released by the matching `*_free` (null is accepted and ignored);
//! - the message of the most recent failure on the calling thread is
//!   available from [`vcrl_last_error_message`];
//! - panics never cross the boundary; they surface as `VCRL_STATUS_PANIC`.
//!
//! The header `include/vcrl.h` is generated from this file at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use vcrl_core::config::{parse_kv, TrainConfig};
use vcrl_core::env::load_corpus;
use vcrl_core::group_stats::{self, RewardGroup};
use vcrl_core::memory_bank::{BankConfig, MemoryBank};
use vcrl_core::metrics::StepMetrics;
use vcrl_core::trainer::Trainer;
use vcrl_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcrlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Parse = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: VcrlStatus, msg: impl Into<String>) -> VcrlStatus {
    set_error(msg);
    status
}

fn from_core(e: Error) -> VcrlStatus {
    let status = match &e {
        Error::Config(_) => VcrlStatus::Config,
        Error::Io { .. } => VcrlStatus::Io,
        Error::Parse { .. } => VcrlStatus::Parse,
        Error::InvalidGroup(_) | Error::UnsupportedReward(_) | Error::InvalidRollout(_) => VcrlStatus::InvalidArgument,
        Error::EmptyBatch | Error::EmptyAfterFilter => VcrlStatus::Runtime,
    };
    fail(status, e.to_string())
}

/// Runs `f`, converting panics into `Panic`.
fn guard(f: impl FnOnce() -> VcrlStatus) -> VcrlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            fail(VcrlStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

macro_rules! non_null {
    ($($p:ident),+) => {
        $(if $p.is_null() {
            return fail(VcrlStatus::NullPointer, concat!("`", stringify!($p), "` is null"));
        })+
    };
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, VcrlStatus> {
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(VcrlStatus::InvalidArgument, format!("`{name}` is not valid UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length excluding the NUL.
/// Pass `buf = NULL` to query the length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn vcrl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vcrl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Unbiased variance `k(G-k) / (G(G-1))` of a binary group.
///
/// # Safety
/// `out` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcrl_binary_variance(g: usize, k: usize, out: *mut f64) -> VcrlStatus {
    guard(|| {
        non_null!(out);
        match RewardGroup::binary(g, k) {
            Ok(group) => {
                *out = group_stats::unbiased_group_variance(&group);
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Largest attainable unbiased variance for group size `g`.
///
/// # Safety
/// `out` must be null or a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vcrl_max_group_variance(g: usize, out: *mut f64) -> VcrlStatus {
    guard(|| {
        non_null!(out);
        match group_stats::max_group_variance(g) {
            Ok(v) => {
                *out = v;
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Normalised variance `p` of `len` rewards in `[0, 1]`.
///
/// # Safety
/// `rewards` must point to `len` readable doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vcrl_normalized_p(rewards: *const f64, len: usize, out: *mut f64) -> VcrlStatus {
    guard(|| {
        non_null!(rewards, out);
        let slice = std::slice::from_raw_parts(rewards, len);
        match RewardGroup::new(slice.to_vec()) {
            Ok(group) => {
                *out = group_stats::normalized_p(&group);
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Replay bank handle.
pub struct VcrlBank(MemoryBank);

/// Creates a bank. `capacity = 0` means unbounded.
///
/// # Safety
/// `out` must be a valid pointer; the handle must be released with
/// [`vcrl_bank_free`].
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_new(
    momentum: f64,
    max_replays: u32,
    capacity: usize,
    out: *mut *mut VcrlBank,
) -> VcrlStatus {
    guard(|| {
        non_null!(out);
        let config = BankConfig {
            momentum,
            max_replays,
            capacity: (capacity > 0).then_some(capacity),
        };
        match MemoryBank::new(config) {
            Ok(bank) => {
                *out = Box::into_raw(Box::new(VcrlBank(bank)));
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `bank` must be null or a handle from [`vcrl_bank_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_free(bank: *mut VcrlBank) {
    if !bank.is_null() {
        drop(Box::from_raw(bank));
    }
}

/// Inserts or refreshes a query; `accepted` reports whether it was stored.
///
/// # Safety
/// `bank` must be a live handle; `accepted` may be null.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_push(bank: *mut VcrlBank, query_id: u32, p: f64, accepted: *mut bool) -> VcrlStatus {
    guard(|| {
        non_null!(bank);
        if !(0.0..=1.0).contains(&p) {
            return fail(VcrlStatus::InvalidArgument, format!("priority {p} outside [0, 1]"));
        }
        let ok = (*bank).0.push(query_id, p);
        if !accepted.is_null() {
            *accepted = ok;
        }
        VcrlStatus::Ok
    })
}

/// Pops up to `m` queries in priority order into `out_ids` (capacity
/// `out_cap`), writing the count to `out_len`. Fails with
/// `VCRL_STATUS_BUFFER_TOO_SMALL`, popping nothing, if `out_cap < min(m, len)`.
///
/// # Safety
/// `bank` must be a live handle; `out_ids` must point to `out_cap` writable
/// `uint32_t`; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_pop(
    bank: *mut VcrlBank,
    m: usize,
    out_ids: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> VcrlStatus {
    guard(|| {
        non_null!(bank, out_len);
        let bank = &mut (*bank).0;
        let take = m.min(bank.len());
        if take > 0 && (out_ids.is_null() || out_cap < take) {
            return fail(VcrlStatus::BufferTooSmall, format!("need room for {take} ids, have {out_cap}"));
        }
        let ids = bank.pop_batch(take);
        if !ids.is_empty() {
            ptr::copy_nonoverlapping(ids.as_ptr(), out_ids, ids.len());
        }
        *out_len = ids.len();
        VcrlStatus::Ok
    })
}

/// Ages every entry by one step with momentum `alpha`.
///
/// # Safety
/// `bank` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_tick(bank: *mut VcrlBank, alpha: f64) -> VcrlStatus {
    guard(|| {
        non_null!(bank);
        if !(0.0..1.0).contains(&alpha) {
            return fail(VcrlStatus::InvalidArgument, format!("alpha {alpha} outside [0, 1)"));
        }
        (*bank).0.tick(alpha);
        VcrlStatus::Ok
    })
}

/// Number of resident entries, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_len(bank: *const VcrlBank) -> usize {
    if bank.is_null() {
        0
    } else {
        (*bank).0.len()
    }
}

/// Lifetime pop count of a query, or 0 for a null handle.
///
/// # Safety
/// `bank` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vcrl_bank_replay_count(bank: *const VcrlBank, query_id: u32) -> u32 {
    if bank.is_null() {
        0
    } else {
        (*bank).0.replay_count(query_id)
    }
}

/// Training handle.
pub struct VcrlTrainer(Trainer);

/// Scalar per-step metrics.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VcrlStepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_response_length: f64,
    pub mean_entropy: f64,
    pub grad_norm: f64,
    pub objective_value: f64,
    pub kappa: f64,
    pub groups_removed: u64,
    pub bank_size: u64,
    pub bank_popped: u64,
    pub bank_pushed: u64,
    pub mask_retained: u64,
    pub batch_groups: u64,
    pub zero_update: bool,
    pub max_replay_count: u64,
}

impl From<&StepMetrics> for VcrlStepMetrics {
    fn from(m: &StepMetrics) -> Self {
        Self {
            step: m.step,
            mean_reward: m.mean_reward,
            mean_response_length: m.mean_response_length,
            mean_entropy: m.mean_entropy,
            grad_norm: m.grad_norm,
            objective_value: m.objective_value,
            kappa: m.kappa,
            groups_removed: m.groups_removed,
            bank_size: m.bank_size,
            bank_popped: m.bank_popped,
            bank_pushed: m.bank_pushed,
            mask_retained: m.mask_retained,
            batch_groups: m.batch_groups,
            zero_update: m.zero_update,
            max_replay_count: m.max_replay_count,
        }
    }
}

/// Creates a trainer over a corpus file. `config` holds optional
/// `key = value` lines (same keys as the CLI config file) applied over the
/// built-in defaults; pass null for defaults.
///
/// # Safety
/// `corpus_path` must be a NUL-terminated string; `config` null or
/// NUL-terminated; `out` valid. Release with [`vcrl_trainer_free`].
#[no_mangle]
pub unsafe extern "C" fn vcrl_trainer_new(
    corpus_path: *const c_char,
    config: *const c_char,
    out: *mut *mut VcrlTrainer,
) -> VcrlStatus {
    guard(|| {
        non_null!(corpus_path, out);
        let path = match str_arg(corpus_path, "corpus_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let mut cfg = TrainConfig::default();
        if !config.is_null() {
            let text = match str_arg(config, "config") {
                Ok(t) => t,
                Err(s) => return s,
            };
            let applied = parse_kv(text, Path::new("<config>"))
                .and_then(|pairs| cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))));
            if let Err(e) = applied.and_then(|_| cfg.validate()) {
                return from_core(e);
            }
        }
        match load_corpus(Path::new(path)).and_then(|tasks| Trainer::new(cfg, tasks)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(VcrlTrainer(t)));
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// # Safety
/// `trainer` must be null or a handle from [`vcrl_trainer_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vcrl_trainer_free(trainer: *mut VcrlTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs one training step; `out` (may be null) receives its metrics.
///
/// # Safety
/// `trainer` must be a live handle; `out` null or valid.
#[no_mangle]
pub unsafe extern "C" fn vcrl_trainer_step(trainer: *mut VcrlTrainer, out: *mut VcrlStepMetrics) -> VcrlStatus {
    guard(|| {
        non_null!(trainer);
        match (*trainer).0.train_step() {
            Ok(m) => {
                if !out.is_null() {
                    *out = VcrlStepMetrics::from(&m);
                }
                VcrlStatus::Ok
            }
            Err(e) => from_core(e),
        }
    })
}

/// Steps completed so far, or 0 for a null handle.
///
/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vcrl_trainer_current_step(trainer: *const VcrlTrainer) -> u64 {
    if trainer.is_null() {
        0
    } else {
        (*trainer).0.step()
    }
}

/// Writes a resumable checkpoint file.
///
/// # Safety
/// `trainer` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vcrl_trainer_save_checkpoint(trainer: *const VcrlTrainer, path: *const c_char) -> VcrlStatus {
    guard(|| {
        non_null!(trainer, path);
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match (*trainer).0.checkpoint().save(Path::new(path)) {
            Ok(()) => VcrlStatus::Ok,
            Err(e) => from_core(e),
        }
    })
}
