//! C ABI over `codesign-core`.
//!
//! Objects are opaque heap handles released with their `*_free` function.
//! Every fallible call returns a [`CodesignStatus`]; on failure a message is
//! kept per thread and read with [`codesign_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use codesign_core::model::{build_g, joint_limits_from_actuation, RobotModel, Transmission, NUM_GEARS};
use codesign_core::ocp::{OcProblemSpec, Space};
use codesign_core::solver::{rollout, solve_motion, SolveResult, SolveStatus, SolverConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodesignStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidModel = 3,
    /// The motion solve finished without a verified feasible trajectory.
    NotConverged = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodesignSpace {
    Joint = 0,
    Actuation = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodesignSolveStatus {
    Converged = 0,
    MaxIters = 1,
    Infeasible = 2,
    NumericalFailure = 3,
}

impl From<SolveStatus> for CodesignSolveStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => CodesignSolveStatus::Converged,
            SolveStatus::MaxIters => CodesignSolveStatus::MaxIters,
            SolveStatus::Infeasible => CodesignSolveStatus::Infeasible,
            SolveStatus::NumericalFailure => CodesignSolveStatus::NumericalFailure,
        }
    }
}

/// Robot model handle.
pub struct CodesignModel {
    inner: RobotModel,
}

/// Solved motion handle.
pub struct CodesignMotion {
    result: SolveResult,
    max_state_deviation: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: CodesignStatus, msg: impl ToString) -> CodesignStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> CodesignStatus) -> CodesignStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(CodesignStatus::Internal, "panic inside codesign library"),
    }
}

unsafe fn read_gears(gears: *const f64) -> Option<[f64; NUM_GEARS]> {
    if gears.is_null() {
        return None;
    }
    let mut g = [0.0; NUM_GEARS];
    g.copy_from_slice(std::slice::from_raw_parts(gears, NUM_GEARS));
    Some(g)
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn codesign_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn codesign_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a handle to the bundled reference arm.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn codesign_model_reference(out: *mut *mut CodesignModel) -> CodesignStatus {
    guard(|| {
        if out.is_null() {
            return fail(CodesignStatus::NullPointer, "out is NULL");
        }
        *out = Box::into_raw(Box::new(CodesignModel { inner: RobotModel::reference() }));
        CodesignStatus::Ok
    })
}

/// Parses and validates a model from a NUL-terminated JSON document.
///
/// # Safety
/// `json` must be a valid C string and `out` valid writable storage.
#[no_mangle]
pub unsafe extern "C" fn codesign_model_from_json(json: *const c_char, out: *mut *mut CodesignModel) -> CodesignStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(CodesignStatus::NullPointer, "json or out is NULL");
        }
        let Ok(text) = CStr::from_ptr(json).to_str() else {
            return fail(CodesignStatus::InvalidArgument, "model JSON is not UTF-8");
        };
        match RobotModel::from_json_str(text) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(CodesignModel { inner: m }));
                CodesignStatus::Ok
            }
            Err(e) => fail(CodesignStatus::InvalidModel, e),
        }
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn codesign_model_free(model: *mut CodesignModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of joints, 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn codesign_model_n_joints(model: *const CodesignModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.n_joints())
}

/// Writes the 4x4 coupling matrix for `gears[4]` into `out[16]`, row major.
///
/// # Safety
/// `gears` must hold 4 values and `out` 16.
#[no_mangle]
pub unsafe extern "C" fn codesign_coupling_matrix(gears: *const f64, out: *mut f64) -> CodesignStatus {
    guard(|| {
        let Some(g) = read_gears(gears) else {
            return fail(CodesignStatus::NullPointer, "gears is NULL");
        };
        if out.is_null() {
            return fail(CodesignStatus::NullPointer, "out is NULL");
        }
        match build_g(&g) {
            Ok(m) => {
                let out = std::slice::from_raw_parts_mut(out, NUM_GEARS * NUM_GEARS);
                for r in 0..NUM_GEARS {
                    for c in 0..NUM_GEARS {
                        out[r * NUM_GEARS + c] = m[(r, c)];
                    }
                }
                CodesignStatus::Ok
            }
            Err(e) => fail(CodesignStatus::InvalidArgument, e),
        }
    })
}

/// Maps motor torque bounds through the transmission of `gears[4]` into
/// joint torque bounds `tau_min[4]`, `tau_max[4]`.
///
/// # Safety
/// All pointers must reference 4 values.
#[no_mangle]
pub unsafe extern "C" fn codesign_joint_torque_limits(
    gears: *const f64,
    tau_u_min: *const f64,
    tau_u_max: *const f64,
    tau_min: *mut f64,
    tau_max: *mut f64,
) -> CodesignStatus {
    guard(|| {
        let Some(g) = read_gears(gears) else {
            return fail(CodesignStatus::NullPointer, "gears is NULL");
        };
        if [tau_u_min, tau_u_max].iter().any(|p| p.is_null()) || tau_min.is_null() || tau_max.is_null() {
            return fail(CodesignStatus::NullPointer, "bound pointer is NULL");
        }
        let lo = std::slice::from_raw_parts(tau_u_min, NUM_GEARS);
        let hi = std::slice::from_raw_parts(tau_u_max, NUM_GEARS);
        let tr = match Transmission::from_gears(&g) {
            Ok(t) => t,
            Err(e) => return fail(CodesignStatus::InvalidArgument, e),
        };
        // Velocity limits do not affect the torque map; pass the torque box.
        match joint_limits_from_actuation(tr.g(), lo, hi, lo, hi) {
            Ok(jl) => {
                std::slice::from_raw_parts_mut(tau_min, NUM_GEARS).copy_from_slice(&jl.tau_min);
                std::slice::from_raw_parts_mut(tau_max, NUM_GEARS).copy_from_slice(&jl.tau_max);
                CodesignStatus::Ok
            }
            Err(e) => fail(CodesignStatus::InvalidArgument, e),
        }
    })
}

/// Solves the reference pick-and-place motion with default solver settings.
/// `gears` may be NULL to use the model's own ratios. On `Ok` or
/// `NotConverged` a motion handle is stored in `out`.
///
/// # Safety
/// `model` must be a live handle, `gears` NULL or 4 values, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn codesign_solve_motion(
    model: *const CodesignModel,
    space: CodesignSpace,
    payload: f64,
    gears: *const f64,
    out: *mut *mut CodesignMotion,
) -> CodesignStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(CodesignStatus::NullPointer, "model is NULL");
        };
        if out.is_null() {
            return fail(CodesignStatus::NullPointer, "out is NULL");
        }
        if !(payload >= 0.0 && payload.is_finite()) {
            return fail(CodesignStatus::InvalidArgument, "payload must be finite and >= 0");
        }
        let g = read_gears(gears).unwrap_or(model.inner.transmission.gear_ratios);
        let tr = match Transmission::from_gears(&g) {
            Ok(t) => t,
            Err(e) => return fail(CodesignStatus::InvalidArgument, e),
        };
        let space = match space {
            CodesignSpace::Joint => Space::Joint,
            CodesignSpace::Actuation => Space::Actuation,
        };
        let loaded = model.inner.with_payload(payload);
        let spec = OcProblemSpec::pick_and_place(space);
        match solve_motion(&loaded, &tr, &spec, &SolverConfig::default()) {
            Ok((nlp, result)) => {
                let audit = rollout(&nlp, &result.trajectory);
                let converged = result.converged();
                let status = result.status;
                *out = Box::into_raw(Box::new(CodesignMotion { result, max_state_deviation: audit.max_state_deviation }));
                if converged {
                    CodesignStatus::Ok
                } else {
                    fail(CodesignStatus::NotConverged, format!("solver finished with status {status}"))
                }
            }
            Err(e) => fail(CodesignStatus::InvalidArgument, e),
        }
    })
}

/// Releases a motion. NULL is ignored.
///
/// # Safety
/// `motion` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_free(motion: *mut CodesignMotion) {
    if !motion.is_null() {
        drop(Box::from_raw(motion));
    }
}

/// # Safety
/// `motion` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_status(motion: *const CodesignMotion) -> CodesignSolveStatus {
    motion.as_ref().map_or(CodesignSolveStatus::NumericalFailure, |m| m.result.status.into())
}

/// Objective value, NaN for NULL.
///
/// # Safety
/// `motion` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_cost(motion: *const CodesignMotion) -> f64 {
    motion.as_ref().map_or(f64::NAN, |m| m.result.objective)
}

/// Largest deviation of an independent rollout from the stored states, NaN for NULL.
///
/// # Safety
/// `motion` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_rollout_deviation(motion: *const CodesignMotion) -> f64 {
    motion.as_ref().map_or(f64::NAN, |m| m.max_state_deviation)
}

/// Number of control intervals N; the trajectory has N+1 states.
///
/// # Safety
/// `motion` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_steps(motion: *const CodesignMotion) -> usize {
    motion.as_ref().map_or(0, |m| m.result.trajectory.steps())
}

unsafe fn copy_rows(rows: &[Vec<f64>], buf: *mut f64, len: usize, written: *mut usize) -> CodesignStatus {
    let need: usize = rows.iter().map(Vec::len).sum();
    if !written.is_null() {
        *written = need;
    }
    if buf.is_null() {
        return if len == 0 { CodesignStatus::Ok } else { fail(CodesignStatus::NullPointer, "buffer is NULL") };
    }
    if len < need {
        return fail(CodesignStatus::BufferTooSmall, format!("buffer holds {len} values, {need} needed"));
    }
    let out = std::slice::from_raw_parts_mut(buf, need);
    for (dst, src) in out.chunks_mut(rows.first().map_or(1, Vec::len).max(1)).zip(rows) {
        dst.copy_from_slice(src);
    }
    CodesignStatus::Ok
}

/// Copies the states, row major `(N+1) x 2n`, into `buf[len]`. The required
/// length is stored in `written` when it is not NULL; call with `buf = NULL`
/// and `len = 0` to query it.
///
/// # Safety
/// `motion` must be a live handle and `buf` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_states(
    motion: *const CodesignMotion,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> CodesignStatus {
    guard(|| match motion.as_ref() {
        Some(m) => copy_rows(&m.result.trajectory.states, buf, len, written),
        None => fail(CodesignStatus::NullPointer, "motion is NULL"),
    })
}

/// Copies the controls, row major `N x m`, like [`codesign_motion_states`].
///
/// # Safety
/// `motion` must be a live handle and `buf` hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn codesign_motion_controls(
    motion: *const CodesignMotion,
    buf: *mut f64,
    len: usize,
    written: *mut usize,
) -> CodesignStatus {
    guard(|| match motion.as_ref() {
        Some(m) => copy_rows(&m.result.trajectory.controls, buf, len, written),
        None => fail(CodesignStatus::NullPointer, "motion is NULL"),
    })
}
