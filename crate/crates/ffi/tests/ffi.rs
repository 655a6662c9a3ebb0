use std::ffi::CString;
use std::ptr;

use lcb_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { lcb_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf.iter().take(n.min(255)).map(|&c| c as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn neveu() -> *mut LcbMechanism {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lcb_mechanism_neveu(1.0, &mut m) }, LCB_OK);
    m
}

#[test]
fn psi_and_inverse_round_trip() {
    let m = neveu();
    let mut v = 0.0;
    assert_eq!(unsafe { lcb_mechanism_psi(m, 2.0, &mut v) }, LCB_OK);
    assert!((v - 2.0 * 2f64.ln()).abs() < 1e-14);
    let mut x = 0.0;
    assert_eq!(unsafe { lcb_mechanism_psi_inverse(m, v, &mut x) }, LCB_OK);
    assert!((x - 2.0).abs() < 1e-10);
    unsafe { lcb_mechanism_free(m) };
}

#[test]
fn invalid_arguments_return_codes() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lcb_mechanism_stable(1.0, 2.5, 0.0, 1.0, &mut m) }, LCB_ERR_INVALID);
    assert!(m.is_null());
    assert!(!last_error().is_empty());
    let mut v = 0.0;
    assert_eq!(unsafe { lcb_mechanism_psi(ptr::null(), 1.0, &mut v) }, LCB_ERR_NULL);
    let n = neveu();
    assert_eq!(unsafe { lcb_mechanism_psi(n, -1.0, &mut v) }, LCB_ERR_INVALID);
    assert_eq!(unsafe { lcb_mechanism_psi(n, 1.0, ptr::null_mut()) }, LCB_ERR_NULL);
    unsafe { lcb_mechanism_free(n) };
    unsafe { lcb_mechanism_free(ptr::null_mut()) };
}

#[test]
fn hypothesis_failure_is_reported() {
    // c = 0 has no scale function.
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lcb_mechanism_feller(1.0, 0.0, 0.0, &mut m) }, LCB_OK);
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lcb_htransform_new(m, &mut h) }, LCB_ERR_INVALID);
    assert!(h.is_null());
    unsafe { lcb_mechanism_free(m) };
}

#[test]
fn toml_mechanism_and_regime() {
    let text = CString::new("family = \"custom\"\nc = 1.0\nsigma = 1.0\ngamma = 0.0\npi = { kind = \"log-tail\", kappa = 0.2 }\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lcb_mechanism_from_toml(text.as_ptr(), &mut m) }, LCB_OK, "{}", last_error());
    let mut r = LcbRegime::default();
    assert_eq!(unsafe { lcb_mechanism_classify(m, &mut r) }, LCB_OK);
    assert_eq!(r.log_moment, 0);
    assert_eq!(r.h_holds, 1);
    unsafe { lcb_mechanism_free(m) };

    let bad = CString::new("family = \"neveu\"\nc = 1.0\nalpha = 1.5\n").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { lcb_mechanism_from_toml(bad.as_ptr(), &mut m) }, LCB_ERR_INVALID);
    assert!(last_error().contains("alpha"));
}

#[test]
fn h_transform_values() {
    let m = neveu();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lcb_htransform_new(m, &mut h) }, LCB_OK, "{}", last_error());
    let mut ell = 0.0;
    assert_eq!(unsafe { lcb_htransform_ell(h, &mut ell) }, LCB_OK);
    assert!((ell - (-2f64).exp()).abs() < 1e-10);
    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(unsafe { lcb_htransform_h(h, 1.0, &mut a) }, LCB_OK);
    assert_eq!(unsafe { lcb_htransform_h(h, 2.0, &mut b) }, LCB_OK);
    assert!(a > 0.0 && b > a);
    let (mut cb, mut cq, mut ck) = (0.0, 0.0, 0.0);
    assert_eq!(unsafe { lcb_htransform_coefficients(h, 1.0, 0.5, &mut cb, &mut cq, &mut ck) }, LCB_OK);
    assert!(cb > 0.0 && cq > 0.0 && ck > 0.0);
    unsafe {
        lcb_htransform_free(h);
        lcb_mechanism_free(m);
    }
}

#[test]
fn simulation_is_reproducible() {
    let m = neveu();
    let mut p = lcb_sim_params_default();
    p.t_max = 0.5;
    p.seed = 9;
    let n = 64;
    let run = || {
        let mut v = vec![0.0; n];
        let mut s = vec![-1; n];
        assert_eq!(unsafe { lcb_simulate_lcb(m, p, 1.0, n, v.as_mut_ptr(), s.as_mut_ptr()) }, LCB_OK);
        (v, s)
    };
    let (v1, s1) = run();
    let (v2, s2) = run();
    assert_eq!(v1, v2);
    assert_eq!(s1, s2);
    for (v, s) in v1.iter().zip(&s1) {
        assert!(*s == LCB_STATUS_ALIVE || *s == LCB_STATUS_ABSORBED || *s == LCB_STATUS_EXTINCT_NUMERICALLY);
        assert!(*v >= 0.0 && v.is_finite());
    }
    assert_eq!(unsafe { lcb_simulate_lcb(m, p, 1.0, n, ptr::null_mut(), ptr::null_mut()) }, LCB_ERR_NULL);

    let mut h = ptr::null_mut();
    assert_eq!(unsafe { lcb_htransform_new(m, &mut h) }, LCB_OK);
    let mut v = vec![0.0; n];
    let mut s = vec![-1; n];
    assert_eq!(unsafe { lcb_simulate_conditioned(h, p, 1.0, n, v.as_mut_ptr(), s.as_mut_ptr()) }, LCB_OK);
    assert!(s.iter().all(|&x| x == LCB_STATUS_ALIVE || x == LCB_STATUS_KILLED));
    unsafe {
        lcb_htransform_free(h);
        lcb_mechanism_free(m);
    }
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/lcb.h")).unwrap();
    for name in ["lcb_mechanism_neveu", "lcb_htransform_new", "lcb_simulate_lcb", "LcbSimParams", "LCB_ERR_PANIC"] {
        assert!(header.contains(name), "{name} missing from lcb.h");
    }
}
