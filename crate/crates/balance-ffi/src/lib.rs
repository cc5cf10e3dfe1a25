//! C ABI for the balance engine. Handles are opaque pointers created and
//! destroyed here; every entry point returns a `BalanceStatus` and never
//! unwinds across the boundary. `balance_last_error_message` returns a
//! thread-local description of the most recent failure.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use balance::harness;
use balance::instance::{self, VectorInstance};
use balance::steinitz::{self, OrderingResult};
use balance::walk::{self, Mode, ModeParams, RunReport, WalkConfig, WalkError};

/// Status codes returned by every API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    IoError = 3,
    ParseError = 4,
    ValidationError = 5,
    ModeMismatch = 6,
    SdpFailure = 7,
    NotZeroSum = 8,
    TooLarge = 9,
    InvalidArgument = 10,
    InternalError = 11,
}

/// Input norm regime for generated instances.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceNormMode {
    L2Unit = 0,
    LinfUnit = 1,
}

/// Walk variant selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceMode {
    L2ToL2 = 0,
    LinfToL2 = 1,
}

/// Algorithm selector for `balance_run`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BalanceAlgorithm {
    FullAsi = 0,
    SiOnly = 1,
}

/// Opaque validated instance handle.
pub struct BalanceInstance {
    inner: VectorInstance,
}

/// Opaque finished-run handle.
pub struct BalanceReport {
    inner: RunReport,
}

/// Opaque Steinitz ordering handle.
pub struct BalanceOrdering {
    inner: OrderingResult,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
}

/// Message describing the most recent failure on this thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn balance_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn guard<F: FnOnce() -> BalanceStatus>(f: F) -> BalanceStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            BalanceStatus::InternalError
        }
    }
}

fn walk_status(err: &WalkError) -> BalanceStatus {
    match err {
        WalkError::ModeMismatch { .. } => BalanceStatus::ModeMismatch,
        WalkError::SdpFailure { .. } | WalkError::Sdp(_) => BalanceStatus::SdpFailure,
        _ => BalanceStatus::InternalError,
    }
}

/// Loads and validates a JSON instance file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid
/// pointer; the returned handle must be released with
/// `balance_instance_free`.
#[no_mangle]
pub unsafe extern "C" fn balance_instance_load(
    path: *const c_char,
    out: *mut *mut BalanceInstance,
) -> BalanceStatus {
    if path.is_null() || out.is_null() {
        return BalanceStatus::NullArgument;
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => return BalanceStatus::InvalidUtf8,
    };
    guard(|| match instance::load_instance(Path::new(path)) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(BalanceInstance { inner }));
            BalanceStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            match e {
                instance::InstanceError::Io { .. } => BalanceStatus::IoError,
                instance::InstanceError::Parse(_) => BalanceStatus::ParseError,
                _ => BalanceStatus::ValidationError,
            }
        }
    })
}

/// Generates a seeded random instance.
///
/// # Safety
/// `out` must be a valid pointer; release the handle with
/// `balance_instance_free`.
#[no_mangle]
pub unsafe extern "C" fn balance_instance_generate(
    n: usize,
    d: usize,
    norm_mode: BalanceNormMode,
    seed: u64,
    out: *mut *mut BalanceInstance,
) -> BalanceStatus {
    if out.is_null() {
        return BalanceStatus::NullArgument;
    }
    if n == 0 || d == 0 {
        set_error("n and d must be >= 1");
        return BalanceStatus::InvalidArgument;
    }
    guard(|| {
        let mode = match norm_mode {
            BalanceNormMode::L2Unit => instance::NormMode::L2Unit,
            BalanceNormMode::LinfUnit => instance::NormMode::LinfUnit,
        };
        let inner = instance::generate_random(n, d, mode, seed);
        *out = Box::into_raw(Box::new(BalanceInstance { inner }));
        BalanceStatus::Ok
    })
}

/// Appends balancing columns so the column sum is zero, returning a new
/// handle.
///
/// # Safety
/// `inst` must be a live handle from this library and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn balance_instance_make_zero_sum(
    inst: *const BalanceInstance,
    out: *mut *mut BalanceInstance,
) -> BalanceStatus {
    if inst.is_null() || out.is_null() {
        return BalanceStatus::NullArgument;
    }
    guard(|| {
        let inner = instance::balance_to_zero_sum(&(*inst).inner);
        *out = Box::into_raw(Box::new(BalanceInstance { inner }));
        BalanceStatus::Ok
    })
}

/// Reads the dimensions of an instance.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn balance_instance_dims(
    inst: *const BalanceInstance,
    d: *mut usize,
    n: *mut usize,
) -> BalanceStatus {
    if inst.is_null() || d.is_null() || n.is_null() {
        return BalanceStatus::NullArgument;
    }
    *d = (*inst).inner.d();
    *n = (*inst).inner.n();
    BalanceStatus::Ok
}

/// # Safety
/// `inst` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn balance_instance_free(inst: *mut BalanceInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// Runs the coloring walk to completion.
///
/// # Safety
/// `inst` must be a live handle and `out` valid; release the report
/// with `balance_report_free`.
#[no_mangle]
pub unsafe extern "C" fn balance_run(
    inst: *const BalanceInstance,
    mode: BalanceMode,
    algorithm: BalanceAlgorithm,
    dt: f64,
    seed: u64,
    out: *mut *mut BalanceReport,
) -> BalanceStatus {
    if inst.is_null() || out.is_null() {
        return BalanceStatus::NullArgument;
    }
    if !(dt > 0.0) || dt > 1.0 {
        set_error("dt must be in (0, 1]");
        return BalanceStatus::InvalidArgument;
    }
    guard(|| {
        let instance = &(*inst).inner;
        let config = WalkConfig {
            dt,
            si_only: algorithm == BalanceAlgorithm::SiOnly,
            ..WalkConfig::default()
        };
        let mode = match mode {
            BalanceMode::L2ToL2 => Mode::L2ToL2,
            BalanceMode::LinfToL2 => Mode::LinfToL2,
        };
        let params = ModeParams::derive(mode, instance.n(), instance.d(), config);
        match walk::run(instance, params, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BalanceReport { inner }));
                BalanceStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                walk_status(&e)
            }
        }
    })
}

/// Final (rounded) max prefix discrepancies of a run.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn balance_report_discrepancy(
    report: *const BalanceReport,
    max_l2: *mut f64,
    max_linf: *mut f64,
) -> BalanceStatus {
    if report.is_null() || max_l2.is_null() || max_linf.is_null() {
        return BalanceStatus::NullArgument;
    }
    *max_l2 = (*report).inner.final_max_l2_prefix_disc;
    *max_linf = (*report).inner.final_max_linf_prefix_disc;
    BalanceStatus::Ok
}

/// Step count of a finished run.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn balance_report_steps(
    report: *const BalanceReport,
    steps: *mut u64,
) -> BalanceStatus {
    if report.is_null() || steps.is_null() {
        return BalanceStatus::NullArgument;
    }
    *steps = (*report).inner.steps;
    BalanceStatus::Ok
}

/// Copies the final coloring (+1/-1 per column) into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` writable bytes; `len` must equal
/// the instance's n.
#[no_mangle]
pub unsafe extern "C" fn balance_report_coloring(
    report: *const BalanceReport,
    buf: *mut i8,
    len: usize,
) -> BalanceStatus {
    if report.is_null() || buf.is_null() {
        return BalanceStatus::NullArgument;
    }
    let coloring = &(*report).inner.final_coloring;
    if coloring.len() != len {
        set_error("buffer length does not match the instance size");
        return BalanceStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(coloring.as_ptr(), buf, len);
    BalanceStatus::Ok
}

/// # Safety
/// `report` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn balance_report_free(report: *mut BalanceReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Orders a zero-sum instance; see the `balance_ordering_*` accessors.
///
/// # Safety
/// `inst` must be a live handle and `out` valid; release with
/// `balance_ordering_free`.
#[no_mangle]
pub unsafe extern "C" fn balance_steinitz_order(
    inst: *const BalanceInstance,
    seed: u64,
    out: *mut *mut BalanceOrdering,
) -> BalanceStatus {
    if inst.is_null() || out.is_null() {
        return BalanceStatus::NullArgument;
    }
    guard(
        || match steinitz::steinitz_order(&(*inst).inner, &WalkConfig::default(), seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(BalanceOrdering { inner }));
                BalanceStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                match e {
                    steinitz::SteinitzError::NotZeroSum
                    | steinitz::SteinitzError::WrongNormMode(_) => BalanceStatus::NotZeroSum,
                    steinitz::SteinitzError::Walk(w) => walk_status(&w),
                    _ => BalanceStatus::InternalError,
                }
            }
        },
    )
}

/// Exact max prefix l2 norm achieved by the ordering.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn balance_ordering_max_prefix_norm(
    ordering: *const BalanceOrdering,
    value: *mut f64,
) -> BalanceStatus {
    if ordering.is_null() || value.is_null() {
        return BalanceStatus::NullArgument;
    }
    *value = (*ordering).inner.max_prefix_norm;
    BalanceStatus::Ok
}

/// Copies the permutation (original index per position) into `buf`.
///
/// # Safety
/// `buf` must point to at least `len` writable entries; `len` must
/// equal the instance's n.
#[no_mangle]
pub unsafe extern "C" fn balance_ordering_permutation(
    ordering: *const BalanceOrdering,
    buf: *mut usize,
    len: usize,
) -> BalanceStatus {
    if ordering.is_null() || buf.is_null() {
        return BalanceStatus::NullArgument;
    }
    let perm = &(*ordering).inner.permutation;
    if perm.len() != len {
        set_error("buffer length does not match the instance size");
        return BalanceStatus::InvalidArgument;
    }
    std::ptr::copy_nonoverlapping(perm.as_ptr(), buf, len);
    BalanceStatus::Ok
}

/// # Safety
/// `ordering` must be a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn balance_ordering_free(ordering: *mut BalanceOrdering) {
    if !ordering.is_null() {
        drop(Box::from_raw(ordering));
    }
}

/// Brute-force optimal max prefix l2 discrepancy (n <= 16).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn balance_oracle(
    inst: *const BalanceInstance,
    value: *mut f64,
) -> BalanceStatus {
    if inst.is_null() || value.is_null() {
        return BalanceStatus::NullArgument;
    }
    guard(|| match harness::brute_force_prefix_opt(&(*inst).inner) {
        Ok(v) => {
            *value = v;
            BalanceStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            BalanceStatus::TooLarge
        }
    })
}
