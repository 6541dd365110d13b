//! C ABI for the gsno workbench.
//!
//! Conventions:
//! - Constructors return an opaque pointer, or null on failure.
//! - Fallible operations return a status code: 0 success, 1 numerical
//!   failure, 2 usage or format error (same contract as the CLI).
//! - After any failure, `gsno_last_error_message` returns a
//!   thread-local, null-terminated description valid until the next
//!   failing call on the same thread.
//! - Every pointer returned by a `_new`/`_load` function must be
//!   released with the matching `_free`; `_free` accepts null.
//!
//! The matching declarations live in `include/gsno.h`.

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use gsno::control::{run_closed_loop, ControllerSpec};
use gsno::formats::load_model;
use gsno::kernels::{solve_k, VolterraConfig};
use gsno::operator::OperatorModel;
use gsno::plant::{SimConfig, Termination};
use gsno::recirc::RecircFamily;
use gsno::{Error, SpatialGrid};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: &Error) -> c_int {
    set_error(&e.to_string());
    e.exit_code() as c_int
}

fn usage(msg: &str) -> c_int {
    set_error(msg);
    2
}

/// Wrap a body so a Rust panic becomes an error code instead of
/// unwinding across the C boundary.
fn guarded(body: impl FnOnce() -> c_int) -> c_int {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            1
        }
    }
}

/// Opaque recirculation family handle.
pub struct GsnoFamily(RecircFamily);
/// Opaque trained-operator handle.
pub struct GsnoModel(OperatorModel);

/// Most recent error message on this thread (empty string if none).
/// The pointer stays valid until the next failing gsno call on the
/// same thread.
#[no_mangle]
pub extern "C" fn gsno_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Crate version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn gsno_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

// ----- families ---------------------------------------------------------

/// Chebyshev recirculation family `beta(x, nu) = A cos((gamma + nu) acos x)`
/// with scheduling box `|nu| <= nu_box`. Null on invalid parameters.
#[no_mangle]
pub extern "C" fn gsno_family_chebyshev(
    amplitude: c_double,
    gamma: c_double,
    nu_box: c_double,
) -> *mut GsnoFamily {
    if !(amplitude.is_finite() && gamma.is_finite() && nu_box > 0.0) {
        usage("family parameters must be finite with nu_box > 0");
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(GsnoFamily(RecircFamily::chebyshev(
        amplitude, gamma, nu_box,
    ))))
}

/// Constant family `beta(x, nu) = b`.
#[no_mangle]
pub extern "C" fn gsno_family_constant(b: c_double, nu_box: c_double) -> *mut GsnoFamily {
    if !(b.is_finite() && nu_box > 0.0) {
        usage("family parameters must be finite with nu_box > 0");
        return std::ptr::null_mut();
    }
    Box::into_raw(Box::new(GsnoFamily(RecircFamily::constant(b, nu_box))))
}

/// # Safety
/// `family` must be null or a pointer from a gsno_family constructor
/// that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn gsno_family_free(family: *mut GsnoFamily) {
    if !family.is_null() {
        drop(Box::from_raw(family));
    }
}

// ----- models -------------------------------------------------------------

/// Load a trained operator from the binary model format.
///
/// # Safety
/// `path` must be a valid null-terminated string and `out` a valid
/// destination pointer.
#[no_mangle]
pub unsafe extern "C" fn gsno_model_load(
    path: *const c_char,
    out: *mut *mut GsnoModel,
) -> c_int {
    guarded(|| {
        if path.is_null() || out.is_null() {
            return usage("null pointer argument");
        }
        let Ok(path) = CStr::from_ptr(path).to_str() else {
            return usage("model path is not valid UTF-8");
        };
        match load_model(path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(GsnoModel(m)));
                0
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of beta sensor samples the model expects.
///
/// # Safety
/// `model` must be a live pointer from `gsno_model_load`.
#[no_mangle]
pub unsafe extern "C" fn gsno_model_n_sensors(model: *const GsnoModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).0.n_sensors()
}

/// # Safety
/// `model` must be null or a pointer from `gsno_model_load` that has
/// not been freed.
#[no_mangle]
pub unsafe extern "C" fn gsno_model_free(model: *mut GsnoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ----- kernels ---------------------------------------------------------------

/// Solve the exact backstepping kernel `k(x, nu)` on the uniform
/// n-point grid over [0, 1] and write it to `out_k` (length n).
///
/// # Safety
/// `family` must be a live family handle; `out_k` must point to at
/// least `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn gsno_kernel_solve(
    family: *const GsnoFamily,
    nu: c_double,
    n: usize,
    out_k: *mut c_double,
) -> c_int {
    guarded(|| {
        if family.is_null() || out_k.is_null() {
            return usage("null pointer argument");
        }
        let run = || -> gsno::Result<Vec<f64>> {
            let grid = SpatialGrid::new(n)?;
            let beta = (*family).0.beta_slice(&grid, nu)?;
            solve_k(&beta, &grid, &VolterraConfig::default())
        };
        match run() {
            Ok(k) => {
                std::ptr::copy_nonoverlapping(k.as_ptr(), out_k, n);
                0
            }
            Err(e) => fail(&e),
        }
    })
}

/// Infer the kernel with the trained operator. `beta` holds the
/// recirculation samples at the model's sensor points (length
/// `gsno_model_n_sensors`); the prediction is written at the `n_query`
/// points `query_xs` (in [0, 1]) into `out_k`.
///
/// # Safety
/// All pointers must be live with the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn gsno_kernel_infer(
    model: *const GsnoModel,
    beta: *const c_double,
    n_beta: usize,
    query_xs: *const c_double,
    n_query: usize,
    out_k: *mut c_double,
) -> c_int {
    guarded(|| {
        if model.is_null() || beta.is_null() || query_xs.is_null() || out_k.is_null() {
            return usage("null pointer argument");
        }
        let model = &(*model).0;
        if n_beta != model.n_sensors() {
            return usage("beta length does not match the model's sensor count");
        }
        let beta = std::slice::from_raw_parts(beta, n_beta);
        let xs = std::slice::from_raw_parts(query_xs, n_query);
        match model.infer_k(beta, xs) {
            Ok(pred) => {
                std::ptr::copy_nonoverlapping(pred.as_ptr(), out_k, n_query);
                0
            }
            Err(e) => fail(&e),
        }
    })
}

// ----- simulation ---------------------------------------------------------------

/// Feedback law selector for `gsno_simulate`.
pub const GSNO_LAW_OPEN: c_int = 0;
pub const GSNO_LAW_LINEAR: c_int = 1;
pub const GSNO_LAW_EXACT_GS: c_int = 2;
pub const GSNO_LAW_NEURAL_GS: c_int = 3;

/// Termination codes written by `gsno_simulate`.
pub const GSNO_TERM_COMPLETED: c_int = 0;
pub const GSNO_TERM_DOMAIN_EXIT: c_int = 1;
pub const GSNO_TERM_BLOW_UP: c_int = 2;

/// Simulate the closed loop from the initial state `u0` (length n,
/// defining the spatial grid) until `t_end` with step `dt`.
/// `model` is required for `GSNO_LAW_NEURAL_GS` and ignored otherwise.
/// On success writes the termination code and the final L2 norm;
/// instability is a recorded outcome, not an error.
///
/// # Safety
/// `family` and (for the neural law) `model` must be live handles;
/// `u0` must point to `n` doubles; out pointers may be null when the
/// value is not wanted.
#[no_mangle]
pub unsafe extern "C" fn gsno_simulate(
    family: *const GsnoFamily,
    law: c_int,
    model: *const GsnoModel,
    u0: *const c_double,
    n: usize,
    dt: c_double,
    t_end: c_double,
    out_termination: *mut c_int,
    out_final_omega: *mut c_double,
) -> c_int {
    guarded(|| {
        if family.is_null() || u0.is_null() {
            return usage("null pointer argument");
        }
        let family = &(*family).0;
        let run = || -> gsno::Result<gsno::control::ClosedLoopRun> {
            let grid = SpatialGrid::new(n)?;
            let vcfg = VolterraConfig::default();
            let spec = match law {
                GSNO_LAW_OPEN => ControllerSpec::open_loop(),
                GSNO_LAW_LINEAR => ControllerSpec::linear(family, &grid, &vcfg)?,
                GSNO_LAW_EXACT_GS => ControllerSpec::exact_gs(vcfg),
                GSNO_LAW_NEURAL_GS => {
                    if model.is_null() {
                        return Err(Error::Config(
                            "the neural law needs a model handle".into(),
                        ));
                    }
                    ControllerSpec::neural_gs((*model).0.clone())
                }
                other => {
                    return Err(Error::Config(format!("unknown law selector {other}")))
                }
            };
            let u0 = std::slice::from_raw_parts(u0, n).to_vec();
            let cfg = SimConfig::new(dt, t_end);
            run_closed_loop(u0, family, &spec, &cfg)
        };
        match run() {
            Ok(run) => {
                if !out_termination.is_null() {
                    *out_termination = match run.trajectory.termination {
                        Termination::Completed => GSNO_TERM_COMPLETED,
                        Termination::DomainExit { .. } => GSNO_TERM_DOMAIN_EXIT,
                        Termination::BlowUp { .. } => GSNO_TERM_BLOW_UP,
                    };
                }
                if !out_final_omega.is_null() {
                    *out_final_omega = run.trajectory.final_omega();
                }
                0
            }
            Err(e) => fail(&e),
        }
    })
}
