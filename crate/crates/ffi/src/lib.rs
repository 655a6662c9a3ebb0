//! C ABI over `lcb-core`.
//!
//! Handles are opaque pointers created by `*_new`/`*_from_*` functions and released by the matching
//! `*_free`. Every fallible call returns an `i32` status (`LCB_OK` or a negative code) and writes its
//! result through an out-pointer; the message of the last failure on the calling thread is available
//! from `lcb_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use lcb_core::cli::MechanismSpec;
use lcb_core::paths::{par_map, CbSim, SimConfig, Status};
use lcb_core::{HTransform, LcbError, Mechanism, ScaleOptions, ScaleTable};

pub const LCB_OK: i32 = 0;
pub const LCB_ERR_NULL: i32 = -1;
pub const LCB_ERR_INVALID: i32 = -2;
pub const LCB_ERR_HYPOTHESIS: i32 = -3;
pub const LCB_ERR_NUMERIC: i32 = -4;
pub const LCB_ERR_SIMULATION: i32 = -5;
pub const LCB_ERR_PANIC: i32 = -6;

/// Path end states written by the simulation calls.
pub const LCB_STATUS_ALIVE: i32 = 0;
pub const LCB_STATUS_ABSORBED: i32 = 1;
pub const LCB_STATUS_EXTINCT_NUMERICALLY: i32 = 2;
pub const LCB_STATUS_KILLED: i32 = 3;
pub const LCB_STATUS_EXPLODED: i32 = 4;

/// A branching mechanism with its competition coefficient.
pub struct LcbMechanism(Mechanism);

/// The excessive function h of a mechanism, with its scale table.
pub struct LcbHTransform(Arc<HTransform>);

/// Simulation parameters; obtain defaults from `lcb_sim_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct LcbSimParams {
    pub dt: f64,
    pub eps_jump: f64,
    pub t_max: f64,
    pub seed: u64,
}

/// Regime flags: 1 true, 0 false, -1 undetermined.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct LcbRegime {
    pub rho: f64,
    pub ell: f64,
    pub grey: i32,
    pub log_moment: i32,
    pub cal_e_infinite: i32,
    pub psi_inf_infinite: i32,
    pub h_holds: i32,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn code(e: &LcbError) -> i32 {
    match e {
        LcbError::InvalidMechanism(_) | LcbError::InvalidConfig(_) | LcbError::NoCompetition | LcbError::Io(_) => {
            LCB_ERR_INVALID
        }
        LcbError::HypothesisNotEstablished(_) => LCB_ERR_HYPOTHESIS,
        LcbError::Simulation(_) => LCB_ERR_SIMULATION,
        _ => LCB_ERR_NUMERIC,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard<F: FnOnce() -> Result<(), i32>>(f: F) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LCB_OK,
        Ok(Err(c)) => c,
        Err(_) => {
            set_error("internal panic".into());
            LCB_ERR_PANIC
        }
    }
}

fn fail(e: LcbError) -> i32 {
    let c = code(&e);
    set_error(e.to_string());
    c
}

fn null() -> i32 {
    set_error("null pointer argument".into());
    LCB_ERR_NULL
}

unsafe fn deref<'a, T>(p: *const T) -> Result<&'a T, i32> {
    p.as_ref().ok_or_else(null)
}

unsafe fn write<T>(out: *mut T, v: T) -> Result<(), i32> {
    if out.is_null() {
        return Err(null());
    }
    out.write(v);
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn tri(v: Option<bool>) -> i32 {
    match v {
        Some(true) => 1,
        Some(false) => 0,
        None => -1,
    }
}

/// Copies the last error message on this thread into `buf` (NUL-terminated, truncated to `len`).
/// Returns the full message length in bytes, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn lcb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

#[no_mangle]
pub extern "C" fn lcb_sim_params_default() -> LcbSimParams {
    let d = SimConfig::default();
    LcbSimParams { dt: d.dt, eps_jump: d.eps_jump, t_max: d.t_max, seed: d.seed }
}

/// Stable mechanism `Ψ(x) = a x^α - γ x`, `1 < α < 2`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_stable(
    a: f64,
    alpha: f64,
    gamma: f64,
    c: f64,
    out: *mut *mut LcbMechanism,
) -> i32 {
    guard(|| {
        let m = Mechanism::stable(a, alpha, gamma, c).map_err(fail)?;
        write(out, boxed(LcbMechanism(m)))
    })
}

/// Neveu mechanism `Ψ(x) = x ln x`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_neveu(c: f64, out: *mut *mut LcbMechanism) -> i32 {
    guard(|| {
        let m = Mechanism::neveu(c).map_err(fail)?;
        write(out, boxed(LcbMechanism(m)))
    })
}

/// Feller mechanism `Ψ(x) = σ²x²/2 - γ x`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_feller(sigma: f64, gamma: f64, c: f64, out: *mut *mut LcbMechanism) -> i32 {
    guard(|| {
        let m = Mechanism::feller(sigma, gamma, c).map_err(fail)?;
        write(out, boxed(LcbMechanism(m)))
    })
}

/// Any mechanism from a TOML table in the CLI's `[mechanism]` format (without the header).
///
/// # Safety
/// `text` must be a NUL-terminated UTF-8 string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_from_toml(text: *const c_char, out: *mut *mut LcbMechanism) -> i32 {
    guard(|| {
        if text.is_null() {
            return Err(null());
        }
        let s = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| fail(LcbError::InvalidConfig("mechanism text is not UTF-8".into())))?;
        let m = MechanismSpec::parse(s).and_then(|spec| spec.build()).map_err(fail)?;
        write(out, boxed(LcbMechanism(m)))
    })
}

/// # Safety
/// `m` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_free(m: *mut LcbMechanism) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// `Ψ(x)` for `x ≥ 0`.
///
/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_psi(m: *const LcbMechanism, x: f64, out: *mut f64) -> i32 {
    guard(|| {
        let m = deref(m)?;
        if !(x >= 0.0) {
            return Err(fail(LcbError::InvalidConfig(format!("Ψ needs x ≥ 0, got {x}"))));
        }
        write(out, m.0.psi(x))
    })
}

/// `Ψ⁻¹(θ)`: the largest root of `Ψ(x) = θ`.
///
/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_psi_inverse(m: *const LcbMechanism, theta: f64, out: *mut f64) -> i32 {
    guard(|| {
        let m = deref(m)?;
        let v = m.0.psi_inverse(theta).map_err(fail)?;
        write(out, v)
    })
}

/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_mechanism_classify(m: *const LcbMechanism, out: *mut LcbRegime) -> i32 {
    guard(|| {
        let r = deref(m)?.0.classify();
        write(
            out,
            LcbRegime {
                rho: r.rho,
                ell: r.ell,
                grey: tri(r.grey.value),
                log_moment: tri(r.log_moment.value),
                cal_e_infinite: tri(r.cal_e_infinite.value),
                psi_inf_infinite: tri(r.psi_inf_infinite.value),
                h_holds: tri(r.h_holds.value),
            },
        )
    })
}

/// Builds the scale table and h. Fails with `LCB_ERR_HYPOTHESIS` unless the mechanism satisfies ℍ.
///
/// # Safety
/// `m` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_htransform_new(m: *const LcbMechanism, out: *mut *mut LcbHTransform) -> i32 {
    guard(|| {
        let m = deref(m)?;
        let table = ScaleTable::build(&m.0, ScaleOptions::default()).map_err(fail)?;
        let ht = HTransform::new(table).map_err(fail)?;
        write(out, boxed(LcbHTransform(Arc::new(ht))))
    })
}

/// # Safety
/// `h` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lcb_htransform_free(h: *mut LcbHTransform) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_htransform_h(h: *const LcbHTransform, z: f64, out: *mut f64) -> i32 {
    guard(|| {
        let h = deref(h)?;
        if !(z >= 0.0) {
            return Err(fail(LcbError::InvalidConfig(format!("h needs z ≥ 0, got {z}"))));
        }
        write(out, h.0.h(z))
    })
}

/// # Safety
/// `h` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lcb_htransform_ell(h: *const LcbHTransform, out: *mut f64) -> i32 {
    guard(|| write(out, deref(h)?.0.ell))
}

/// Coefficients of the conditioned dynamics at state `z` and jump size `y`.
///
/// # Safety
/// `h` must be a live handle; `b`, `q`, `k` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn lcb_htransform_coefficients(
    h: *const LcbHTransform,
    z: f64,
    y: f64,
    b: *mut f64,
    q: *mut f64,
    k: *mut f64,
) -> i32 {
    guard(|| {
        let h = deref(h)?;
        if !(z >= 0.0 && y > 0.0) {
            return Err(fail(LcbError::InvalidConfig(format!("coefficients need z ≥ 0 and y > 0, got z={z} y={y}"))));
        }
        let c = h.0.coefficients(z, y);
        write(b, c.b)?;
        write(q, c.q)?;
        write(k, c.k)
    })
}

fn config(p: &LcbSimParams, n: usize) -> SimConfig {
    SimConfig { dt: p.dt, eps_jump: p.eps_jump, t_max: p.t_max, seed: p.seed, n_paths: n, ..SimConfig::default() }
}

fn status_code(s: Status) -> i32 {
    match s {
        Status::AliveAtHorizon => LCB_STATUS_ALIVE,
        Status::AbsorbedZero => LCB_STATUS_ABSORBED,
        Status::ExtinctNumerically => LCB_STATUS_EXTINCT_NUMERICALLY,
        Status::Killed => LCB_STATUS_KILLED,
        Status::Exploded => LCB_STATUS_EXPLODED,
    }
}

unsafe fn run_paths(sim: &CbSim, z0: f64, n: usize, tag: &str, values: *mut f64, status: *mut i32) -> Result<(), i32> {
    if values.is_null() || status.is_null() {
        return Err(null());
    }
    let cfg = &sim.cfg;
    let paths = par_map(n, cfg.seed, tag, |_, rng| sim.run(z0, rng));
    let vs = std::slice::from_raw_parts_mut(values, n);
    let st = std::slice::from_raw_parts_mut(status, n);
    for (i, p) in paths.into_iter().enumerate() {
        let p = p.map_err(fail)?;
        vs[i] = p.end_value;
        st[i] = status_code(p.status);
    }
    Ok(())
}

/// Simulates `n` LCB paths from `z0` to `params.t_max`; writes end values (`∞` after explosion, 0 after
/// absorption) and `LCB_STATUS_*` codes. Output depends only on the inputs, not on thread count.
///
/// # Safety
/// `m` must be a live handle; `values` and `status` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn lcb_simulate_lcb(
    m: *const LcbMechanism,
    params: LcbSimParams,
    z0: f64,
    n: usize,
    values: *mut f64,
    status: *mut i32,
) -> i32 {
    guard(|| {
        let m = deref(m)?;
        let sim = CbSim::lcb(&m.0, &config(&params, n)).map_err(fail)?;
        run_paths(&sim, z0, n, "ffi/lcb", values, status)
    })
}

/// As `lcb_simulate_lcb` for the h-transformed process.
///
/// # Safety
/// `h` must be a live handle; `values` and `status` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn lcb_simulate_conditioned(
    h: *const LcbHTransform,
    params: LcbSimParams,
    z0: f64,
    n: usize,
    values: *mut f64,
    status: *mut i32,
) -> i32 {
    guard(|| {
        let h = deref(h)?;
        let sim = CbSim::conditioned(h.0.clone(), &config(&params, n)).map_err(fail)?;
        run_paths(&sim, z0, n, "ffi/conditioned", values, status)
    })
}
