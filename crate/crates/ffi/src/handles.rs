//! Opaque handles and `extern "C"` entry points.
//!
//! # Safety
//!
//! All functions follow one contract: pointer arguments must be valid for
//! the duration of the call, out-pointers must point to writable memory, and
//! handles must come from the constructor of the matching type and not be
//! used after `free`. Every function checks for null and reports errors
//! through the returned status code; the detailed message of the most recent
//! failure on the current thread is available via
//! [`as_last_error_message`]. No function panics across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use agestruct::bifurcation::{continue_branch, local_expansion, SolveOptions};
use agestruct::spectral::normalize_birth_with;
use agestruct::{
    AgeGrid, Branch, Error, Grids, ModelSpec, ParamValue, Params, SpaceGrid, SpectralData,
};

/// Status code of every FFI call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsStatus {
    AsOk = 0,
    AsNullPointer = 1,
    AsInvalidInput = 2,
    AsSolverFailure = 3,
    AsUtf8Error = 4,
    AsPanic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(message: impl Into<String>) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = message.into());
}

fn status_of(err: &Error) -> AsStatus {
    set_error(err.to_string());
    if err.is_input_error() {
        AsStatus::AsInvalidInput
    } else {
        AsStatus::AsSolverFailure
    }
}

fn guard(f: impl FnOnce() -> AsStatus) -> AsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            AsStatus::AsPanic
        }
    }
}

/// A normalized model together with its grids; the unit of work every other
/// call operates on.
pub struct AsProblem {
    model: ModelSpec,
    grids: Grids,
    scale: f64,
    spectral: SpectralData,
}

/// A computed branch.
pub struct AsBranch {
    branch: Branch,
}

/// One branch point in plain C layout.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct AsBranchPoint {
    pub eps: f64,
    pub n: f64,
    pub r_qu: f64,
    pub residual: f64,
    pub amplitude: f64,
    pub positive: bool,
    pub sign_flipped: bool,
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, AsStatus> {
    if ptr.is_null() {
        set_error("null string pointer");
        return Err(AsStatus::AsNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string is not valid UTF-8");
        AsStatus::AsUtf8Error
    })
}

fn parse_params(json: &str) -> Result<Params, AsStatus> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| {
        set_error(format!("params JSON: {e}"));
        AsStatus::AsInvalidInput
    })?;
    let object = value.as_object().ok_or_else(|| {
        set_error("params JSON must be an object");
        AsStatus::AsInvalidInput
    })?;
    let mut params = Params::new();
    for (key, value) in object {
        let converted = match value {
            serde_json::Value::Number(n) => match n.as_f64() {
                Some(x) => ParamValue::Number(x),
                None => {
                    set_error(format!("parameter `{key}` is not a finite number"));
                    return Err(AsStatus::AsInvalidInput);
                }
            },
            serde_json::Value::String(s) => ParamValue::Text(s.clone()),
            other => {
                set_error(format!(
                    "parameter `{key}` must be a number or string, got {other}"
                ));
                return Err(AsStatus::AsInvalidInput);
            }
        };
        params.insert(key.clone(), converted);
    }
    Ok(params)
}

/// Builds a preset model on the given grids and normalizes its birth
/// modulus. `params_json` is a JSON object of preset parameters (numbers or
/// strings); it may be null for an empty map, but the required preset keys
/// must then be supplied, so in practice it rarely is.
///
/// # Safety
/// `preset` and `params_json` must be NUL-terminated strings (or null);
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn as_problem_new(
    preset: *const c_char,
    params_json: *const c_char,
    n_a: usize,
    n_x: usize,
    out: *mut *mut AsProblem,
) -> AsStatus {
    guard(|| {
        if out.is_null() {
            set_error("null out pointer");
            return AsStatus::AsNullPointer;
        }
        ptr::write(out, ptr::null_mut());
        let preset_name = match read_str(preset) {
            Ok(s) => s,
            Err(code) => return code,
        };
        let params = if params_json.is_null() {
            Params::new()
        } else {
            match read_str(params_json).and_then(parse_params) {
                Ok(p) => p,
                Err(code) => return code,
            }
        };
        let build = || -> Result<AsProblem, Error> {
            let preset = preset_name.parse()?;
            let model = agestruct::build_preset(preset, &params)?;
            let grids = Grids::new(
                AgeGrid::new(model.a_max, n_a)?,
                SpaceGrid::new(model.domain_length, n_x, model.bc)?,
            );
            let (model, scale, spectral) = normalize_birth_with(&model, &grids, 1e-12, 100_000)?;
            Ok(AsProblem {
                model,
                grids,
                scale,
                spectral,
            })
        };
        match build() {
            Ok(problem) => {
                ptr::write(out, Box::into_raw(Box::new(problem)));
                AsStatus::AsOk
            }
            Err(err) => status_of(&err),
        }
    })
}

/// Releases a problem handle. Null is ignored.
///
/// # Safety
/// `problem` must come from [`as_problem_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_problem_free(problem: *mut AsProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Birth normalization factor of the problem.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_problem_birth_scale(
    problem: *const AsProblem,
    out: *mut f64,
) -> AsStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            set_error("null pointer");
            return AsStatus::AsNullPointer;
        }
        ptr::write(out, (*problem).scale);
        AsStatus::AsOk
    })
}

/// Spectral radius of the normalized low-density reproduction operator
/// (1 up to solver tolerance).
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_problem_radius(problem: *const AsProblem, out: *mut f64) -> AsStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            set_error("null pointer");
            return AsStatus::AsNullPointer;
        }
        ptr::write(out, (*problem).spectral.radius);
        AsStatus::AsOk
    })
}

/// Branch slope at the bifurcation point: `n(eps) = 1 + slope*eps + o(eps)`.
///
/// # Safety
/// `problem` must be a live handle; `out_slope` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_expansion_slope(
    problem: *const AsProblem,
    fd_step: f64,
    out_slope: *mut f64,
) -> AsStatus {
    guard(|| {
        if problem.is_null() || out_slope.is_null() {
            set_error("null pointer");
            return AsStatus::AsNullPointer;
        }
        let problem = &*problem;
        match local_expansion(&problem.model, &problem.grids, fd_step) {
            Ok(expansion) => {
                ptr::write(out_slope, expansion.slope);
                AsStatus::AsOk
            }
            Err(err) => status_of(&err),
        }
    })
}

/// Continues the branch over `eps in +-[eps_max/steps, ..., eps_max]` and
/// returns a branch handle. A truncated branch is a solver failure; the
/// message names the amplitude where the corrector gave up.
///
/// # Safety
/// `problem` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_branch_compute(
    problem: *const AsProblem,
    eps_max: f64,
    steps: usize,
    out: *mut *mut AsBranch,
) -> AsStatus {
    guard(|| {
        if problem.is_null() || out.is_null() {
            set_error("null pointer");
            return AsStatus::AsNullPointer;
        }
        ptr::write(out, ptr::null_mut());
        let problem = &*problem;
        let run = || -> Result<Branch, Error> {
            let expansion = local_expansion(&problem.model, &problem.grids, 1e-4)?;
            let branch = continue_branch(
                &problem.model,
                &problem.grids,
                &expansion,
                eps_max,
                steps,
                &SolveOptions::default(),
            )?;
            if let Some((eps, reason)) = branch.truncations.first() {
                return Err(Error::BranchTruncated {
                    eps: *eps,
                    reason: reason.clone(),
                });
            }
            Ok(branch)
        };
        match run() {
            Ok(branch) => {
                ptr::write(out, Box::into_raw(Box::new(AsBranch { branch })));
                AsStatus::AsOk
            }
            Err(err) => status_of(&err),
        }
    })
}

/// Releases a branch handle. Null is ignored.
///
/// # Safety
/// `branch` must come from [`as_branch_compute`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn as_branch_free(branch: *mut AsBranch) {
    if !branch.is_null() {
        drop(Box::from_raw(branch));
    }
}

/// Number of points on the branch (points are ordered by amplitude).
///
/// # Safety
/// `branch` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn as_branch_len(branch: *const AsBranch) -> usize {
    if branch.is_null() {
        return 0;
    }
    (*branch).branch.points.len()
}

/// Copies point `index` into `out`.
///
/// # Safety
/// `branch` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn as_branch_point(
    branch: *const AsBranch,
    index: usize,
    out: *mut AsBranchPoint,
) -> AsStatus {
    guard(|| {
        if branch.is_null() || out.is_null() {
            set_error("null pointer");
            return AsStatus::AsNullPointer;
        }
        let points = &(*branch).branch.points;
        let Some(p) = points.get(index) else {
            set_error(format!(
                "index {index} out of range for branch of {} points",
                points.len()
            ));
            return AsStatus::AsInvalidInput;
        };
        ptr::write(
            out,
            AsBranchPoint {
                eps: p.eps,
                n: p.n,
                r_qu: p.r_qu,
                residual: p.residual,
                amplitude: p.u.sup_norm(),
                positive: p.positive,
                sign_flipped: p.sign_flipped,
            },
        );
        AsStatus::AsOk
    })
}

/// Copies the most recent error message on this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length,
/// so calling with `len == 0` sizes a buffer.
///
/// # Safety
/// `buf` must point to `len` writable bytes (or be null with `len == 0`).
#[no_mangle]
pub unsafe extern "C" fn as_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|slot| {
        let message = slot.borrow();
        let bytes = message.as_bytes();
        if !buf.is_null() && len > 0 {
            let copy_len = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, copy_len);
            ptr::write(buf.add(copy_len), 0);
        }
        bytes.len()
    })
}
