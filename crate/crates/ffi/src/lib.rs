//! C interface to `aerman`.
//!
//! Models and controllers are opaque heap handles created and released through this API.
//! Every fallible function returns an [`AmStatus`]; on failure the message is available
//! from [`am_last_error`] on the same thread until the next failing call.
//!
//! Vectors cross the boundary as `(pointer, length)` pairs in the same ordering the Rust
//! types use for `to_vector`. A flat signal is packed as `p_e, p_e', p_e'', p_e'''`
//! (12 values), then `psi, psi', psi''`, then `eta, eta', eta''` (`3 k` values).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use aerman::controller::{clf_qp_control, Clf};
use aerman::flatness::{flat_outputs_from_state, state_from_flat, FlatSignal};
use aerman::reduced::extended_dynamics;
use aerman::sim::{simulate_closed_loop, write_csv, Scenario};
use aerman::{AMParams, Error, ExtendedInput, ExtendedState};
use nalgebra::{DMatrix, DVector, Vector3};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AmStatus {
    Ok = 0,
    NullPointer = 1,
    /// A buffer length did not match the model dimensions, or a value was out of range.
    InvalidArgument = 2,
    /// Euler-angle, free-fall or decoupling singularity.
    Singularity = 3,
    /// Ill-conditioning, a Riccati failure or a non-finite result.
    Numerical = 4,
    Config = 5,
    Io = 6,
    Panic = 7,
}

/// Opaque manipulator model.
pub struct AmModel {
    params: AMParams,
}

/// Opaque CLF-QP controller bound to a model's joint count.
pub struct AmController {
    params: AMParams,
    clf: Clf,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AmStepInfo {
    pub value: f64,
    pub value_rate: f64,
    pub lambda: f64,
    /// Nonzero when the decrease constraint was active.
    pub active: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct AmSummary {
    /// Nonzero when the run reached its final time without a guard trip.
    pub completed: i32,
    pub t_final: f64,
    pub control_steps: usize,
    pub final_h_norm: f64,
    pub zoh_constant: f64,
    pub max_model_decrease_violation: f64,
    pub events_applied: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(AmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            _ if e.is_singularity() => AmStatus::Singularity,
            Error::InvalidParams(_) | Error::Dimension(_) | Error::NonUnitGravity { .. } | Error::OutOfRange { .. } => {
                AmStatus::InvalidArgument
            }
            Error::Config(_) | Error::Json(_) => AmStatus::Config,
            Error::Io(_) | Error::Csv(_) => AmStatus::Io,
            _ => AmStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AmStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside aerman".into());
            AmStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, expected: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(Failure(AmStatus::NullPointer, format!("{what} is null")));
    }
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(Failure(AmStatus::NullPointer, format!("{what} is null")));
    }
    if len != expected {
        return Err(invalid(format!("{what} has length {len}, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(AmStatus::NullPointer, "handle is null".into()))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Failure> {
    if p.is_null() {
        return Err(Failure(AmStatus::NullPointer, "path is null".into()));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(Path::new(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(AmStatus::NullPointer, "output handle pointer is null".into()));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn input_dim(k: usize) -> usize {
    k + 4
}

fn flat_dim(k: usize) -> usize {
    15 + 3 * k
}

fn pack_flat(s: &FlatSignal, out: &mut [f64]) {
    let k = s.k();
    for (i, d) in s.p_e.iter().enumerate() {
        out[3 * i..3 * i + 3].copy_from_slice(d.as_slice());
    }
    out[12..15].copy_from_slice(&s.psi);
    for (j, d) in s.eta.iter().enumerate() {
        out[15 + j * k..15 + (j + 1) * k].copy_from_slice(d.as_slice());
    }
}

fn unpack_flat(k: usize, v: &[f64]) -> FlatSignal {
    let p = |i: usize| Vector3::from_column_slice(&v[3 * i..3 * i + 3]);
    let e = |j: usize| DVector::from_column_slice(&v[15 + j * k..15 + (j + 1) * k]);
    FlatSignal { p_e: [p(0), p(1), p(2), p(3)], psi: [v[12], v[13], v[14]], eta: [e(0), e(1), e(2)] }
}

/// Message of the last failure on this thread, or null. Owned by the library; valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn am_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Two-link planar arm with the default parameters.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn am_model_two_link(out: *mut *mut AmModel) -> AmStatus {
    guard(|| store(out, AmModel { params: AMParams::planar_two_link() }))
}

/// Model from a TOML parameter file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`am_model_two_link`].
#[no_mangle]
pub unsafe extern "C" fn am_model_load(path: *const c_char, out: *mut *mut AmModel) -> AmStatus {
    guard(|| {
        let params = AMParams::load(path_arg(path)?)?;
        store(out, AmModel { params })
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_model_free(model: *mut AmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of joints `k`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_model_joint_count(model: *const AmModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.k())
}

/// Lengths of the extended state, the extended input and a packed flat signal.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn am_model_dims(
    model: *const AmModel,
    state: *mut usize,
    input: *mut usize,
    flat: *mut usize,
) -> AmStatus {
    guard(|| {
        let k = handle(model)?.params.k();
        for (p, v) in [(state, ExtendedState::dim(k)), (input, input_dim(k)), (flat, flat_dim(k))] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Time derivative of the extended state under an extended input.
///
/// # Safety
/// Buffers must hold the stated number of `double`s.
#[no_mangle]
pub unsafe extern "C" fn am_extended_dynamics(
    model: *const AmModel,
    state: *const f64,
    state_len: usize,
    input: *const f64,
    input_len: usize,
    out: *mut f64,
    out_len: usize,
) -> AmStatus {
    guard(|| {
        let params = &handle(model)?.params;
        let k = params.k();
        let n = ExtendedState::dim(k);
        let q = ExtendedState::from_slice(k, slice(state, state_len, n, "state")?)?;
        let u = ExtendedInput::from_slice(k, slice(input, input_len, input_dim(k), "input")?)?;
        let out = slice_mut(out, out_len, n, "out")?;
        out.copy_from_slice(extended_dynamics(params, &q, &u)?.as_slice());
        Ok(())
    })
}

/// Flat outputs and their derivatives up to the auxiliary-input order.
///
/// # Safety
/// Buffers must hold the stated number of `double`s.
#[no_mangle]
pub unsafe extern "C" fn am_flat_outputs(
    model: *const AmModel,
    state: *const f64,
    state_len: usize,
    input: *const f64,
    input_len: usize,
    flat: *mut f64,
    flat_len: usize,
) -> AmStatus {
    guard(|| {
        let params = &handle(model)?.params;
        let k = params.k();
        let q = ExtendedState::from_slice(k, slice(state, state_len, ExtendedState::dim(k), "state")?)?;
        let u = ExtendedInput::from_slice(k, slice(input, input_len, input_dim(k), "input")?)?;
        let out = slice_mut(flat, flat_len, flat_dim(k), "flat")?;
        pack_flat(&flat_outputs_from_state(params, &q, &u)?, out);
        Ok(())
    })
}

/// Extended state recovered from a packed flat signal. Third derivatives of `p_e` are ignored.
///
/// # Safety
/// Buffers must hold the stated number of `double`s.
#[no_mangle]
pub unsafe extern "C" fn am_state_from_flat(
    model: *const AmModel,
    flat: *const f64,
    flat_len: usize,
    state: *mut f64,
    state_len: usize,
) -> AmStatus {
    guard(|| {
        let params = &handle(model)?.params;
        let k = params.k();
        let sigma = unpack_flat(k, slice(flat, flat_len, flat_dim(k), "flat")?);
        let out = slice_mut(state, state_len, ExtendedState::dim(k), "state")?;
        out.copy_from_slice(state_from_flat(params, &sigma)?.to_vector().as_slice());
        Ok(())
    })
}

/// Controller with a diagonal CLF weight. A null `q_diag` means the identity. A
/// non-positive or NaN `lambda` selects the rate derived from the Riccati solution.
///
/// # Safety
/// `model` must be a live handle, `q_diag` null or `q_len` readable `double`s.
#[no_mangle]
pub unsafe extern "C" fn am_controller_new(
    model: *const AmModel,
    q_diag: *const f64,
    q_len: usize,
    lambda: f64,
    out: *mut *mut AmController,
) -> AmStatus {
    guard(|| {
        let params = handle(model)?.params.clone();
        let k = params.k();
        let n = ExtendedState::dim(k);
        let q = if q_diag.is_null() {
            DMatrix::identity(n, n)
        } else {
            DMatrix::from_diagonal(&DVector::from_column_slice(slice(q_diag, q_len, n, "q_diag")?))
        };
        let lambda = (lambda > 0.0).then_some(lambda);
        let clf = Clf::new(k, q, lambda)?;
        store(out, AmController { params, clf })
    })
}

/// # Safety
/// `ctrl` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn am_controller_free(ctrl: *mut AmController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Decrease rate in use, or NaN for a null handle.
///
/// # Safety
/// `ctrl` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn am_controller_lambda(ctrl: *const AmController) -> f64 {
    ctrl.as_ref().map_or(f64::NAN, |c| c.clf.lambda)
}

/// One CLF-QP solve: extended input for `state` tracking the packed `reference`.
///
/// # Safety
/// Buffers must hold the stated number of `double`s; `info` may be null.
#[no_mangle]
pub unsafe extern "C" fn am_controller_step(
    ctrl: *const AmController,
    state: *const f64,
    state_len: usize,
    reference: *const f64,
    reference_len: usize,
    input: *mut f64,
    input_len: usize,
    info: *mut AmStepInfo,
) -> AmStatus {
    guard(|| {
        let c = handle(ctrl)?;
        let k = c.params.k();
        let q = ExtendedState::from_slice(k, slice(state, state_len, ExtendedState::dim(k), "state")?)?;
        let sigma = unpack_flat(k, slice(reference, reference_len, flat_dim(k), "reference")?);
        let out = slice_mut(input, input_len, input_dim(k), "input")?;
        let sol = clf_qp_control(&c.params, &q, &sigma, &c.clf, None)?;
        out.copy_from_slice(sol.u_de.to_vector().as_slice());
        if !info.is_null() {
            *info = AmStepInfo {
                value: sol.value,
                value_rate: sol.value_rate,
                lambda: sol.lambda,
                active: i32::from(sol.active),
            };
        }
        Ok(())
    })
}

/// Runs a scenario file. When `csv_path` is non-null the trajectory is written there.
///
/// # Safety
/// `config` and `csv_path` must be null or NUL-terminated; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn am_simulate(
    config: *const c_char,
    csv_path: *const c_char,
    summary: *mut AmSummary,
) -> AmStatus {
    guard(|| {
        let scenario = Scenario::load(path_arg(config)?)?;
        let traj = simulate_closed_loop(&scenario)?;
        if !csv_path.is_null() {
            let file = std::fs::File::create(path_arg(csv_path)?).map_err(Error::from)?;
            write_csv(&traj, std::io::BufWriter::new(file))?;
        }
        if !summary.is_null() {
            let s = &traj.summary;
            *summary = AmSummary {
                completed: i32::from(s.completed),
                t_final: s.t_final,
                control_steps: s.control_steps,
                final_h_norm: s.final_h_norm,
                zoh_constant: s.zoh_constant,
                max_model_decrease_violation: s.max_model_decrease_violation,
                events_applied: s.events_applied,
            };
        }
        Ok(())
    })
}
