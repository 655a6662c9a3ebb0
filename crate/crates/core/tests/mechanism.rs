use lcb_core::mechanism::{classify_with, Basis, ClassifyOptions, JumpMeasure, Mechanism, TabulatedDensity};
use proptest::prelude::*;

fn tabulated() -> Mechanism {
    let t = TabulatedDensity { points: vec![(0.01, 50.0), (0.1, 20.0), (1.0, 1.0), (10.0, 0.01)], tail_exponent: 2.5 };
    Mechanism::custom(0.5, 0.1, JumpMeasure::TabulatedDensity(t), 1.0).unwrap()
}

fn logtail(kappa: f64) -> Mechanism {
    Mechanism::custom(1.0, 0.0, JumpMeasure::LogTail { kappa }, 1.0).unwrap()
}

#[test]
fn closed_forms_match_quadrature() {
    let mechs = [
        Mechanism::stable(1.0, 1.5, 0.2, 1.0).unwrap(),
        Mechanism::stable(0.7, 1.2, -0.1, 1.0).unwrap(),
        Mechanism::neveu(1.0).unwrap(),
    ];
    for m in &mechs {
        for k in 0..=24 {
            let x = 10f64.powf(-3.0 + 0.25 * k as f64);
            let a = m.psi(x);
            let b = m.psi_quadrature(x).unwrap();
            assert!((a - b).abs() <= 1e-8 * a.abs().max(x), "{:?} x={x}: {a} vs {b}", m.closed_form);
        }
    }
}

#[test]
fn regime_examples() {
    let r = Mechanism::stable(1.0, 1.5, 0.0, 1.0).unwrap().classify();
    assert_eq!(r.grey.value, Some(true));
    assert_eq!(r.log_moment.value, Some(true));
    assert_eq!(r.h_holds.value, Some(true));
    assert!(r.ell > 0.0);

    let r = Mechanism::neveu(1.0).unwrap().classify();
    assert_eq!(r.grey.value, Some(false));
    assert_eq!(r.h_holds.value, Some(true));
    assert!((r.ell - (-2f64).exp()).abs() < 1e-10);

    let r = logtail(0.2).classify();
    assert_eq!(r.log_moment.value, Some(false));
    assert_eq!(r.cal_e_infinite.value, Some(true));
    assert_eq!(r.h_holds.value, Some(true));
    assert_eq!(r.ell, 0.0);

    let r = logtail(0.8).classify();
    assert_eq!(r.cal_e_infinite.value, Some(false));
    assert_eq!(r.h_holds.value, Some(false));

    let r = Mechanism::feller(1.0, -0.5, 0.0).unwrap().classify();
    assert_eq!(r.h_holds.basis, Basis::NotApplicable);
    assert!((r.rho - 0.5).abs() < 1e-12);

    let m = Mechanism::stable(1.0, 1.5, 0.0, 1.0).unwrap().with_override(Some(false));
    let r = m.classify();
    assert_eq!(r.h_holds.value, Some(false));
    assert_eq!(r.h_holds.basis, Basis::Override);
}

#[test]
fn numeric_classification_agrees_with_family_rules() {
    for m in [Mechanism::stable(1.0, 1.5, 0.0, 1.0).unwrap(), Mechanism::neveu(1.0).unwrap()] {
        let a = m.classify();
        let b = classify_with(&m, ClassifyOptions { force_numeric: true });
        assert_eq!(a.grey.value, b.grey.value, "{:?}", m.closed_form);
        assert_eq!(b.grey.basis, Basis::Numeric);
    }
}

#[test]
fn neveu_inverse_is_exact_at_e() {
    let m = Mechanism::neveu(1.0).unwrap();
    let e = std::f64::consts::E;
    assert!((m.psi_inverse(e).unwrap() - e).abs() < 1e-12);
}

#[test]
fn feller_inverse_matches_root_formula() {
    // Ψ(x) = x²/2 + x/2 gives Ψ⁻¹(1) = (-1/2 + √(1/4 + 2)).
    let m = Mechanism::feller(1.0, -0.5, 0.0).unwrap();
    let want = -0.5 + (0.25f64 + 2.0).sqrt();
    assert!((m.psi_inverse(1.0).unwrap() - want).abs() < 1e-12);
}

#[test]
fn invalid_mechanisms_rejected() {
    assert!(Mechanism::stable(1.0, 2.5, 0.0, 1.0).is_err());
    assert!(Mechanism::feller(-1.0, 0.0, 1.0).is_err() || Mechanism::feller(1.0, 0.0, -1.0).is_err());
    assert!(Mechanism::custom(1.0, 0.0, JumpMeasure::LogTail { kappa: -1.0 }, 1.0).is_err());
}

fn arb_mech() -> impl Strategy<Value = Mechanism> {
    prop_oneof![
        (0.2f64..3.0, 1.05f64..1.95, -1.0f64..1.0, 0.1f64..3.0).prop_map(|(a, al, g, c)| Mechanism::stable(a, al, g, c).unwrap()),
        (0.1f64..2.0, -1.0f64..1.0, 0.0f64..3.0).prop_map(|(s, g, c)| Mechanism::feller(s, g, c).unwrap()),
        (0.0f64..1.5, -1.0f64..1.0, 0.05f64..2.0, 0.1f64..3.0, 0.05f64..2.0, 0.1f64..3.0).prop_map(|(s, g, r1, y1, r2, y2)| {
            Mechanism::custom(s, g, JumpMeasure::CompoundPoisson { atoms: vec![(y1, r1), (y2, r2)] }, 1.0).unwrap()
        }),
        (0.05f64..1.0).prop_map(logtail),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn psi_vanishes_at_zero_and_is_convex(m in arb_mech(), x in 1e-3f64..50.0, h in 1e-3f64..1.0) {
        prop_assert_eq!(m.psi(0.0), 0.0);
        let (a, b, c) = (m.psi(x), m.psi(x + h), m.psi(x + 2.0 * h));
        let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
        prop_assert!(a - 2.0 * b + c >= -1e-9 * scale);
    }

    #[test]
    fn psi_prime_matches_difference_quotient(m in arb_mech(), x in 1e-2f64..20.0) {
        let h = 1e-5 * x;
        let fd = (m.psi(x + h) - m.psi(x - h)) / (2.0 * h);
        let d = m.psi_prime(x);
        prop_assert!((fd - d).abs() < 1e-5 * (1.0 + d.abs()), "fd {} d {}", fd, d);
    }

    #[test]
    fn inverse_round_trips(m in arb_mech(), theta in 0.01f64..20.0) {
        let c0 = Mechanism { c: 0.0, ..m };
        if c0.psi(1e6) > theta {
            let x = c0.psi_inverse(theta).unwrap();
            prop_assert!((c0.psi(x) - theta).abs() < 1e-10 * theta.max(1.0));
            prop_assert!(x >= c0.largest_zero().unwrap());
        }
    }

    #[test]
    fn hypothesis_implies_competition(m in arb_mech()) {
        let r = m.classify();
        if m.c == 0.0 {
            prop_assert_ne!(r.h_holds.value, Some(true));
        }
        if r.log_moment.value == Some(true) && m.c > 0.0 {
            prop_assert!(r.ell > 0.0);
        }
        if r.log_moment.value == Some(false) {
            prop_assert_eq!(r.ell, 0.0);
        }
    }
}

#[test]
fn tabulated_density_mechanism_consistent() {
    let m = tabulated();
    for &x in &[0.01, 0.5, 3.0, 40.0] {
        let a = m.psi(x);
        let b = m.psi_quadrature(x).unwrap();
        assert!((a - b).abs() < 1e-8 * a.abs().max(x));
    }
}
