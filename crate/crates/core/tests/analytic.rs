use lcb_core::analytic::{dual_generator_apply, generator_apply, generator_up_apply, HTransform, ScaleOptions, ScaleTable, TestFn};
use lcb_core::mechanism::ell_direct;
use lcb_core::LcbError;
use lcb_core::mechanism::{JumpMeasure, Mechanism};

// Feller with σ²/2 = 1, γ = 0, c = 2, x0 = 1: I(x) = (x² - 1)/2, S(x) = e^{1/2} E1(x²/2) / 2.
const FELLER_S1: f64 = 0.461455316241865234416;
const FELLER_F1_0: f64 = 2.06636567706124646923;

fn feller() -> Mechanism {
    Mechanism::feller(2f64.sqrt(), 0.0, 2.0).unwrap()
}

fn stable() -> Mechanism {
    Mechanism::stable(1.0, 1.5, 0.0, 1.0).unwrap()
}

#[test]
fn feller_scale_fixtures() {
    let t = ScaleTable::build(&feller(), ScaleOptions::default()).unwrap();
    let s1 = t.s(1.0);
    assert!((s1 - FELLER_S1).abs() < 1e-10 * FELLER_S1, "S(1) = {s1}");
    let f = t.f_theta(1.0, 0.0).unwrap();
    assert!((f - FELLER_F1_0).abs() < 1e-10 * FELLER_F1_0, "f = {f}");
    let ell = t.compute_ell().unwrap();
    assert!((ell - 0.5f64.exp()).abs() < 1e-8, "ell = {ell}");
    println!("len {} xmax {}", t.len(), t.x_max);
}

fn logtail() -> Mechanism {
    Mechanism::custom(1.0, 0.0, JumpMeasure::LogTail { kappa: 0.2 }, 1.0).unwrap()
}

fn neveu() -> Mechanism {
    Mechanism::neveu(1.0).unwrap()
}

const TOL: f64 = 1e-4;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn h_representations_agree() {
    for m in [feller(), stable(), neveu(), logtail()] {
        let t = std::time::Instant::now();
        let ht = HTransform::new(ScaleTable::build(&m, ScaleOptions::default()).unwrap()).unwrap();
        println!("{:?} built in {:?} ell {} h'(0) {}", m.closed_form, t.elapsed(), ht.ell, ht.h_prime_zero);
        for &z in &[1e-6, 1e-3, 0.1, 0.7, 1.0, 3.0, 50.0, 1e4] {
            let a = ht.h_exact(z).unwrap();
            let b = ht.h_first_rep(z).unwrap();
            let c = ht.h(z);
            println!("z {z:e} exact {a:e} first {b:e} table {c:e}");
            assert!(rel(a, b) < 1e-8, "reps differ at {z}");
            assert!(rel(c, a) < 1e-8, "table differs at {z}");
            let hp = ht.h_prime_exact(z).unwrap();
            assert!(rel(ht.h_prime(z), hp) < 1e-7, "h' at {z}");
        }
    }
}

#[test]
fn h_is_excessive_with_rate() {
    for m in [feller(), stable(), neveu(), logtail()] {
        let ht = HTransform::new(ScaleTable::build(&m, ScaleOptions::default()).unwrap()).unwrap();
        let f = TestFn::new(|z| ht.h(z), |z| ht.h_prime(z), |z| ht.h_second(z));
        for &z in &[0.05, 0.5, 1.0, 5.0] {
            let lh = generator_apply(&m, &f, z).unwrap();
            let want = -0.5 * m.c * ht.ell * z;
            // Largest local term; near 0 the diffusion part dominates and the jump part cancels it.
            let competition = 0.5 * m.c * z * z * ht.h_prime(z);
            let diffusion = 0.5 * m.sigma * m.sigma * z * ht.h_second(z).abs();
            let scale = competition.max(diffusion);
            println!("{:?} z {z} Lh {lh:e} want {want:e} scale {scale:e}", m.pi);
            assert!((lh - want).abs() < TOL * scale.max(want.abs()), "z = {z}");
        }
    }
}

#[test]
fn conditioned_generator_annihilates_inverse_h() {
    for m in [stable(), neveu(), logtail()] {
        let ht = HTransform::new(ScaleTable::build(&m, ScaleOptions::default()).unwrap()).unwrap();
        let f = TestFn::new(
            |z| 1.0 / ht.h(z),
            |z| -ht.h_prime(z) / (ht.h(z) * ht.h(z)),
            |z| {
                let (h, h1, h2) = (ht.h(z), ht.h_prime(z), ht.h_second(z));
                2.0 * h1 * h1 / (h * h * h) - h2 / (h * h)
            },
        );
        for &z in &[0.5, 1.0, 5.0] {
            let v = generator_up_apply(&ht, &f, z).unwrap();
            let scale = 0.5 * m.c * z * z * ht.h_prime(z) / (ht.h(z) * ht.h(z));
            println!("{:?} z {z} L^ 1/h = {v:e} scale {scale:e}", m.pi);
            assert!(v.abs() < TOL * scale, "z = {z}");
        }
    }
}

#[test]
fn speed_times_scale_derivative_is_one() {
    for m in [feller(), stable(), neveu(), logtail()] {
        let t = ScaleTable::build(&m, ScaleOptions::default()).unwrap();
        let mut worst: f64 = 0.0;
        for x in t.grid() {
            let v = -x * t.s_prime_interp(x) * t.m(x);
            worst = worst.max((v - 1.0).abs());
        }
        // Between nodes as well.
        for w in t.grid().windows(2) {
            let x = (w[0] * w[1]).sqrt();
            let v = -x * t.s_prime_interp(x) * t.m(x);
            worst = worst.max((v - 1.0).abs());
        }
        println!("{:?} worst {worst:e}", m.pi);
        assert!(worst < 1e-8);
    }
}

fn compound_poisson() -> Mechanism {
    Mechanism::custom(0.8, 0.3, JumpMeasure::CompoundPoisson { atoms: vec![(0.5, 1.0), (2.0, 0.4)] }, 1.5).unwrap()
}

#[test]
fn laplace_duality_of_generators() {
    // ℒ e^{-x·}(z) equals 𝒜 e^{-·z}(x).
    for m in [feller(), stable(), neveu(), logtail(), compound_poisson()] {
        for &(x, z) in &[(0.3, 0.7), (1.0, 1.0), (2.5, 0.2), (0.05, 4.0)] {
            let lhs = generator_apply(&m, &TestFn::exponential(x), z).unwrap();
            let rhs = dual_generator_apply(&m, &TestFn::exponential(z), x);
            assert!((lhs - rhs).abs() < 1e-8 * (1.0 + rhs.abs()), "{:?} x={x} z={z}: {lhs} vs {rhs}", m.pi);
        }
    }
}

#[test]
fn ell_matches_direct_quadrature() {
    for m in [feller(), stable(), neveu(), compound_poisson()] {
        let t = ScaleTable::build(&m, ScaleOptions::default()).unwrap();
        let a = t.compute_ell().unwrap();
        let b = ell_direct(&m).unwrap();
        assert!(rel(a, b) < 1e-9, "{:?}: {a} vs {b}", m.pi);
    }
    assert!((ScaleTable::build(&neveu(), ScaleOptions::default()).unwrap().compute_ell().unwrap() - (-2f64).exp()).abs() < 1e-12);
    assert_eq!(ScaleTable::build(&logtail(), ScaleOptions::default()).unwrap().compute_ell().unwrap(), 0.0);
}

#[test]
fn table_round_trip_and_tamper() {
    let m = stable();
    let t = ScaleTable::build(&m, ScaleOptions::default()).unwrap();
    let text = t.dump();
    let u = ScaleTable::load(&m, &text).unwrap();
    assert!(t.max_rel_diff(&u) < 1e-12);
    for &x in &[1e-12, 1e-3, 0.5, 1.0, 3.0] {
        assert!(rel(u.s(x), t.s(x)) < 1e-12);
    }
    let other = Mechanism::stable(1.0, 1.6, 0.0, 1.0).unwrap();
    assert!(matches!(ScaleTable::load(&other, &text), Err(LcbError::Table(_))));
    let bad = text.replacen("lcb-scale-table v1", "lcb-scale-table v0", 1);
    assert!(ScaleTable::load(&m, &bad).is_err());
}

#[test]
fn doubling_x_max_is_immaterial() {
    let m = stable();
    let t = ScaleTable::build(&m, ScaleOptions::default()).unwrap();
    let t2 = ScaleTable::build(&m, ScaleOptions { x_max: Some(2.0 * t.x_max), ..Default::default() }).unwrap();
    let h1 = HTransform::new(t).unwrap().h(1.0);
    let h2 = HTransform::new(t2).unwrap().h(1.0);
    assert!(rel(h1, h2) < 1e-6);
}

#[test]
fn coefficients_extend_continuously_to_zero() {
    let ht = HTransform::new(ScaleTable::build(&stable(), ScaleOptions::default()).unwrap()).unwrap();
    let c0 = ht.coefficients(0.0, 0.7);
    let c1 = ht.coefficients(1e-9, 0.7);
    assert_eq!(c0.b, 1.0);
    assert!((c1.b - 1.0).abs() < 1e-6);
    assert!(rel(c1.q, c0.q) < 1e-6);
    assert!(rel(c1.k, c0.k) < 1e-6);
    // Boundary generator is the z → 0 limit.
    let f = TestFn::exponential(1.3);
    let a = generator_up_apply(&ht, &f, 0.0).unwrap();
    let b = generator_up_apply(&ht, &f, 1e-7).unwrap();
    assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{a} vs {b}");
}

#[test]
fn f_theta_reduces_to_h_prime_at_critical_power() {
    // p = 2θ/c = 1 gives f_θ(z) = h'(z).
    let m = stable();
    let ht = HTransform::new(ScaleTable::build(&m, ScaleOptions::default()).unwrap()).unwrap();
    for &z in &[0.0, 0.3, 2.0] {
        let f = ht.scale.f_theta(0.5 * m.c, z).unwrap();
        assert!(rel(f, ht.h_prime_exact(z).unwrap()) < 1e-9);
    }
    // Decreasing in z, ratio in (0, 1].
    let f0 = ht.scale.f_theta(0.3, 0.0).unwrap();
    let f1 = ht.scale.f_theta(0.3, 1.0).unwrap();
    assert!(f1 < f0 && f1 > 0.0);
}

#[test]
fn hypothesis_gate() {
    let c0 = Mechanism::feller(1.0, 0.0, 0.0).unwrap();
    assert!(matches!(ScaleTable::build(&c0, ScaleOptions::default()), Err(LcbError::NoCompetition)));
    let undetermined = stable().with_override(Some(false));
    assert!(matches!(ScaleTable::build(&undetermined, ScaleOptions::default()), Err(LcbError::HypothesisNotEstablished(_))));
    assert!(ScaleTable::build(&undetermined, ScaleOptions { allow_unverified: true, ..Default::default() }).is_ok());
}
