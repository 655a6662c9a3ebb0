use std::sync::Arc;

use lcb_core::montecarlo::{ks_one_sample, ks_two_sample, McEstimate};
use lcb_core::paths::*;
use lcb_core::{HTransform, JumpMeasure, Mechanism, ScaleOptions, ScaleTable};
use proptest::prelude::*;

fn stable() -> Mechanism {
    Mechanism::stable(1.0, 1.5, 0.0, 1.0).unwrap()
}

fn neveu() -> Mechanism {
    Mechanism::neveu(1.0).unwrap()
}

fn logtail() -> Mechanism {
    Mechanism::custom(1.0, 0.0, JumpMeasure::LogTail { kappa: 0.2 }, 1.0).unwrap()
}

/// Finite-variation: no Gaussian part, two atoms, drift coefficient 1.
fn compound(c: f64) -> Mechanism {
    Mechanism::custom(0.0, 0.0, JumpMeasure::CompoundPoisson { atoms: vec![(0.5, 2.0), (2.0, 0.5)] }, c).unwrap()
}

fn scale(m: &Mechanism) -> ScaleTable {
    ScaleTable::build(m, ScaleOptions::default()).unwrap()
}

fn ht(m: &Mechanism) -> Arc<HTransform> {
    Arc::new(HTransform::new(scale(m)).unwrap())
}

fn cfg(n: usize, t_max: f64) -> SimConfig {
    SimConfig { n_paths: n, t_max, seed: 11, ..Default::default() }
}

fn run_all(sim: &CbSim, n: usize, z0: f64, tag: &str) -> Vec<Path> {
    par_map(n, sim.cfg.seed, tag, |_, rng| sim.run(z0, rng).unwrap())
}

fn within(est: &McEstimate, exact: f64) -> bool {
    (est.mean - exact).abs() <= 3.0 * est.stderr + 1e-12
}

#[test]
fn levy_pure_drift_is_linear() {
    let m = Mechanism::custom(0.0, 1.0, JumpMeasure::None, 0.0).unwrap();
    let mut rng = lcb_core::rng::RngStream::new(1, "drift", 0);
    let p = simulate_levy(&m, &cfg(1, 1.0), &mut rng).unwrap();
    assert!((p.end_value - 1.0).abs() < 1e-12, "{}", p.end_value);
}

#[test]
fn levy_brownian_variance() {
    let m = Mechanism::custom(1.0, 0.0, JumpMeasure::None, 0.0).unwrap();
    let c = SimConfig { dt: 0.1, ..cfg(100_000, 1.0) };
    let ys = par_map(c.n_paths, 3, "bm", |_, rng| simulate_levy(&m, &c, rng).unwrap().end_value);
    let sq: Vec<f64> = ys.iter().map(|y| y * y).collect();
    assert!(within(&McEstimate::from_samples(&sq), 1.0));
    assert!(within(&McEstimate::from_samples(&ys), 0.0));
}

#[test]
fn levy_compound_poisson_jump_count() {
    // One atom of size 1 at rate 2: the compensator cancels the mean, and Y_1 + 2 counts the jumps.
    let m = Mechanism::custom(0.0, 0.0, JumpMeasure::CompoundPoisson { atoms: vec![(1.0, 2.0)] }, 0.0).unwrap();
    let c = cfg(50_000, 1.0);
    let counts = par_map(c.n_paths, 5, "cp", |_, rng| simulate_levy(&m, &c, rng).unwrap().end_value + 2.0);
    for k in &counts {
        assert!((k - k.round()).abs() < 1e-9 && *k >= 0.0);
    }
    let est = McEstimate::from_samples(&counts);
    assert!(within(&est, 2.0), "{est:?}");
}

fn verhulst_exact(z0: f64, a: f64, hc: f64, t: f64) -> f64 {
    if a == 0.0 {
        z0 / (1.0 + hc * z0 * t)
    } else {
        a * z0 * (a * t).exp() / (a + hc * z0 * ((a * t).exp() - 1.0))
    }
}

#[test]
fn gou_deterministic_matches_logistic_ode() {
    let m = Mechanism::custom(0.0, 1.0, JumpMeasure::None, 1.0).unwrap();
    let c = SimConfig { checkpoints: vec![0.5, 1.0, 2.0], ..cfg(1, 2.0) };
    let mut rng = lcb_core::rng::RngStream::new(1, "gou-ode", 0);
    let p = GouSim::new(&m, &c).unwrap().run(0.1, &mut rng).unwrap();
    for (t, v) in c.checkpoints.iter().zip(&p.checkpoints) {
        let want = verhulst_exact(0.1, 1.0, 0.5, *t);
        assert!((v - want).abs() < 1e-8 * want, "t={t}: {v} vs {want}");
    }
    let mut rng = lcb_core::rng::RngStream::new(1, "lcb-ode", 0);
    let q = CbSim::lcb(&m, &c).unwrap().run(0.1, &mut rng).unwrap();
    for (t, v) in c.checkpoints.iter().zip(&q.checkpoints) {
        let want = verhulst_exact(0.1, 1.0, 0.5, *t);
        assert!((v - want).abs() < 1e-10 * want, "t={t}: {v} vs {want}");
    }
}

#[test]
fn gou_without_competition_is_exponential() {
    let m = Mechanism::custom(0.0, -0.5, JumpMeasure::None, 0.0).unwrap();
    let c = SimConfig { checkpoints: vec![1.0, 3.0], ..cfg(1, 3.0) };
    let mut rng = lcb_core::rng::RngStream::new(1, "gou-exp", 0);
    let p = GouSim::new(&m, &c).unwrap().run(2.0, &mut rng).unwrap();
    for (t, v) in c.checkpoints.iter().zip(&p.checkpoints) {
        let want = 2.0 * (-0.5 * t).exp();
        assert!((v - want).abs() < 1e-8 * want, "t={t}: {v} vs {want}");
    }
}

fn final_values(ps: &[Path]) -> Vec<f64> {
    ps.iter().map(|p| if p.alive() { p.end_value } else { p.status.terminal_value() }).collect()
}

#[test]
fn gou_and_direct_simulation_agree_in_law() {
    let mechs = [stable(), Mechanism::feller(1.0, 0.0, 1.0).unwrap()];
    for (k, m) in mechs.iter().enumerate() {
        for (z0, t) in [(1.0, 0.5), (0.5, 1.0)] {
            let c = cfg(10_000, t);
            let direct = run_all(&CbSim::lcb(m, &c).unwrap(), c.n_paths, z0, "direct");
            let gou = GouSim::new(m, &c).unwrap();
            let other: Vec<Path> = par_map(c.n_paths, c.seed, "gou", |_, rng| gou.run(z0, rng).unwrap());
            let (d, p) = ks_two_sample(&final_values(&direct), &final_values(&other));
            assert!(p > 0.01, "mechanism {k}, z0={z0}, t={t}: D={d} p={p}");
        }
    }
}

#[test]
fn gou_progeny_equals_clock() {
    let c = SimConfig { record: true, dt: 1e-4, ..cfg(200, 5.0) };
    let gou = GouSim::new(&stable(), &c).unwrap();
    let paths: Vec<Path> = par_map(c.n_paths, 2, "clock", |_, rng| gou.run(1.0, rng).unwrap());
    for p in &paths {
        let mut j = 0.0;
        for w in p.times.windows(2).zip(p.values.windows(2)) {
            let (t, v) = w;
            j += 0.5 * (t[1] - t[0]) * (v[0] + v[1]);
        }
        // Jumps land between recorded points; tolerance covers one trapezoid over the largest gap.
        let gap = p.times.windows(2).map(|t| t[1] - t[0]).fold(0.0, f64::max);
        let top = p.values.iter().cloned().fold(0.0, f64::max);
        assert!((j - p.progeny).abs() <= 0.02 * p.progeny + gap * top, "J={j} clock={}", p.progeny);
    }
}

#[test]
fn zero_start_stays_at_zero() {
    let c = SimConfig { checkpoints: vec![0.5, 1.0], ..cfg(100, 1.0) };
    let sim = CbSim::lcb(&stable(), &c).unwrap();
    for p in run_all(&sim, c.n_paths, 0.0, "zero") {
        assert_eq!(p.end_value, 0.0);
        assert!(p.checkpoints.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn feller_mean_decays_exponentially() {
    let m = Mechanism::feller(1.0, -0.5, 0.0).unwrap();
    let c = SimConfig { checkpoints: vec![0.5, 1.0], ..cfg(20_000, 1.0) };
    let paths = run_all(&CbSim::lcb(&m, &c).unwrap(), c.n_paths, 1.0, "feller-mean");
    for (i, t) in c.checkpoints.iter().enumerate() {
        let xs: Vec<f64> = paths.iter().map(|p| p.checkpoints[i]).collect();
        let est = McEstimate::from_samples(&xs);
        assert!(within(&est, (-0.5 * t).exp()), "t={t}: {est:?}");
    }
}

#[test]
fn extinction_fraction_grows_with_horizon() {
    let mut last = 0.0;
    for t in [0.5, 2.0, 8.0] {
        let c = cfg(2000, t);
        let paths = run_all(&CbSim::lcb(&stable(), &c).unwrap(), c.n_paths, 1.0, "ext");
        let frac = paths.iter().filter(|p| !p.alive()).count() as f64 / c.n_paths as f64;
        assert!(frac >= last, "t={t}: {frac} < {last}");
        last = frac;
    }
    assert!(last > 0.9, "{last}");
}

#[test]
fn u_without_drift_is_a_martingale() {
    let m = Mechanism::custom(0.0, 0.0, JumpMeasure::None, 1.0).unwrap();
    let c = cfg(20_000, 1.0);
    let u = DualSim::u(&m, &c).unwrap();
    let xs = par_map(c.n_paths, 4, "u-mart", |_, rng| u.run(1.0, rng).unwrap().end_value);
    assert!(within(&McEstimate::from_samples(&xs), 1.0));
}

#[test]
fn v_escapes_every_level() {
    let mut last = 0.0;
    for t in [0.5, 2.0, 6.0] {
        let c = cfg(2000, t);
        let v = DualSim::v(&stable(), &c).unwrap();
        let above = par_map(c.n_paths, 6, "v-up", |_, rng| {
            let p = v.run(1.0, rng).unwrap();
            p.status == Status::Exploded || p.end_value > 10.0
        });
        let frac = above.iter().filter(|&&b| b).count() as f64 / c.n_paths as f64;
        assert!(frac >= last, "t={t}");
        last = frac;
    }
    assert!(last > 0.95, "{last}");
}

#[test]
fn u_coupling_is_monotone() {
    let c = cfg(2000, 1.0);
    let u = DualSim::u(&stable(), &c).unwrap();
    let pairs = par_map(c.n_paths, 8, "u-couple", |_, rng| u.run_coupled(0.5, 1.0, rng).unwrap());
    let bad = pairs.iter().filter(|(a, b)| a > b).count();
    assert_eq!(bad, 0);
}

#[test]
fn v_down_drift_is_pulled_below_v() {
    let m = stable();
    let s = Arc::new(scale(&m));
    let c = cfg(1, 1.0);
    let (v, vd) = (DualSim::v(&m, &c).unwrap(), DualSim::v_down(s, &c).unwrap());
    for x in [0.01, 0.1, 1.0, 5.0, 20.0] {
        assert!(vd.drift(x) < v.drift(x), "x={x}");
    }
}

#[test]
fn v_down_is_absorbed_and_matches_survival() {
    let m = stable();
    let s = Arc::new(scale(&m));
    let long = cfg(2000, 20.0);
    let vd = DualSim::v_down(s.clone(), &long).unwrap();
    let dead = par_map(long.n_paths, 9, "vd-abs", |_, rng| !vd.run(1.0, rng).unwrap().alive());
    assert!(dead.iter().filter(|&&d| d).count() as f64 > 0.99 * long.n_paths as f64);

    // P↓_y(T₀ > t) = E_y S(V_t) / S(y).
    let (y, t) = (1.0, 0.5);
    let c = cfg(20_000, t);
    let vd = DualSim::v_down(s.clone(), &c).unwrap();
    let alive: Vec<f64> = par_map(c.n_paths, 10, "vd-surv", |_, rng| vd.run(y, rng).unwrap().alive() as u8 as f64);
    let v = DualSim::v(&m, &c).unwrap();
    let ratio: Vec<f64> = par_map(c.n_paths, 10, "v-surv", |_, rng| {
        let p = v.run(y, rng).unwrap();
        if p.alive() {
            s.s(p.end_value.max(f64::MIN_POSITIVE)) / s.s(y)
        } else {
            0.0
        }
    });
    let (a, b) = (McEstimate::from_samples(&alive), McEstimate::from_samples(&ratio));
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * se, "{a:?} vs {b:?}");
}

#[test]
fn conditioned_kills_only_when_ell_positive() {
    let c = cfg(2000, 2.0);
    let lt = CbSim::conditioned(ht(&logtail()), &c).unwrap();
    assert!(run_all(&lt, c.n_paths, 1.0, "kill-lt").iter().all(|p| p.status != Status::Killed));
    let nv = CbSim::conditioned(ht(&neveu()), &c).unwrap();
    let killed = run_all(&nv, c.n_paths, 1.0, "kill-nv").iter().filter(|p| p.status == Status::Killed).count();
    assert!(killed > 0);
}

#[test]
fn conditioned_leaves_zero_and_stays_positive() {
    let c = SimConfig { checkpoints: vec![0.5, 1.0], ..cfg(1000, 1.0) };
    let sim = CbSim::conditioned(ht(&stable()), &c).unwrap();
    for p in run_all(&sim, c.n_paths, 0.0, "from-zero") {
        if p.alive() {
            assert!(p.checkpoints.iter().all(|&v| v > 0.0), "{:?}", p.checkpoints);
        }
    }
    for p in run_all(&sim, c.n_paths, 1.0, "inf") {
        assert!(p.running_inf > 0.0);
    }
}

#[test]
fn conditioned_paths_have_no_negative_jumps() {
    let m = compound(1.0);
    let c = SimConfig { record: true, ..cfg(200, 1.0) };
    let a = -m.pi.split(c.eps_jump).compensator;
    for (name, sim) in [("lcb", CbSim::lcb(&m, &c).unwrap()), ("cond", CbSim::conditioned(ht(&m), &c).unwrap())] {
        for p in run_all(&sim, c.n_paths, 1.0, name) {
            for (t, v) in p.times.windows(2).zip(p.values.windows(2)) {
                if !v[1].is_finite() {
                    continue;
                }
                let floor = verhulst(v[0], a, 0.5, t[1] - t[0]);
                assert!(v[1] >= floor - 1e-9 * floor.abs().max(1.0), "{name}: {} -> {} (flow {floor})", v[0], v[1]);
            }
        }
    }
}

#[test]
fn weighted_mean_weight_below_one() {
    let m = stable();
    let h = ht(&m);
    let c = cfg(5000, 1.0);
    let sim = CbSim::lcb(&m, &c).unwrap();
    let ws = par_map(c.n_paths, 12, "weights", |_, rng| sim.run_weighted(&h, 1.0, rng).unwrap().1);
    let est = McEstimate::from_samples(&ws);
    assert!(est.mean + 3.0 * est.stderr < 1.0, "{est:?}");
}

#[test]
fn cb_conditioned_critical_has_no_kills() {
    let m = Mechanism::feller(1.0, 0.0, 0.0).unwrap();
    let c = cfg(2000, 2.0);
    let sim = CbSim::cb_conditioned(&m, &c).unwrap();
    assert!(run_all(&sim, c.n_paths, 1.0, "crit").iter().all(|p| p.status != Status::Killed));
}

#[test]
fn cb_conditioned_subcritical_lifetime_is_exponential() {
    let m = Mechanism::feller(1.0, -0.5, 0.0).unwrap();
    let c = SimConfig { dt: 1e-2, ..cfg(2000, 60.0) };
    let sim = CbSim::cb_conditioned(&m, &c).unwrap();
    let life: Vec<f64> = run_all(&sim, c.n_paths, 1.0, "sub").iter().map(|p| p.lifetime).collect();
    assert!(life.iter().all(|l| l.is_finite()));
    let (d, p) = ks_one_sample(&life, |x| 1.0 - (-0.5 * x).exp());
    assert!(p > 0.01, "D={d} p={p}");
}

#[test]
fn cb_conditioned_holding_time_at_zero() {
    let m = Mechanism::custom(0.0, 0.0, JumpMeasure::CompoundPoisson { atoms: vec![(0.5, 2.0)] }, 0.0).unwrap();
    assert!((m.psi_prime_at_zero()).abs() < 1e-12);
    let c = SimConfig { record: true, dt: 1e-2, ..cfg(2000, 12.0) };
    let sim = CbSim::cb_conditioned(&m, &c).unwrap();
    let holds: Vec<f64> = run_all(&sim, c.n_paths, 0.0, "hold")
        .iter()
        .map(|p| p.times.iter().zip(&p.values).find(|(_, v)| **v > 0.0).map_or(f64::INFINITY, |(t, _)| *t))
        .collect();
    // The rate is Ψ'(∞) = 1 here.
    let (d, p) = ks_one_sample(&holds, |x| 1.0 - (-x).exp());
    assert!(p > 0.01, "D={d} p={p}");
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let c = SimConfig { checkpoints: vec![0.5], ..cfg(500, 1.0) };
    let sim = CbSim::lcb(&stable(), &c).unwrap();
    let one = with_workers(Some(1), || run_all(&sim, c.n_paths, 1.0, "det"));
    let four = with_workers(Some(4), || run_all(&sim, c.n_paths, 1.0, "det"));
    assert_eq!(one, four);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lcb_paths_respect_state_space(seed in 0u64..1000, z0 in 0.0f64..5.0, which in 0usize..3) {
        let m = [stable(), neveu(), logtail()][which].clone();
        let c = SimConfig { record: true, seed, ..cfg(1, 0.5) };
        let mut rng = lcb_core::rng::RngStream::new(seed, "prop", 0);
        let p = CbSim::lcb(&m, &c).unwrap().run(z0, &mut rng).unwrap();
        prop_assert!(p.values.iter().all(|v| *v >= 0.0));
        prop_assert!(p.progeny >= 0.0 && p.progeny.is_finite());
        prop_assert!(p.running_inf <= z0 + 1e-12);
        prop_assert!(p.times.windows(2).all(|w| w[1] >= w[0]));
        if p.alive() {
            prop_assert!((p.times.last().copied().unwrap_or(0.5) - 0.5).abs() < 1e-12);
        } else {
            prop_assert!(p.lifetime <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn dual_paths_stay_nonnegative(seed in 0u64..1000, x0 in 0.0f64..5.0, up in any::<bool>()) {
        let c = SimConfig { seed, ..cfg(1, 0.5) };
        let sim = if up { DualSim::v(&stable(), &c).unwrap() } else { DualSim::u(&stable(), &c).unwrap() };
        let mut rng = lcb_core::rng::RngStream::new(seed, "prop-dual", 0);
        let p = sim.run(x0, &mut rng).unwrap();
        prop_assert!(p.end_value >= 0.0);
    }

    #[test]
    fn verhulst_flow_is_monotone_in_start(a in -2.0f64..2.0, hc in 0.0f64..2.0, z in 0.0f64..10.0, dz in 0.0f64..1.0, h in 0.0f64..2.0) {
        prop_assert!(verhulst(z + dz, a, hc, h) >= verhulst(z, a, hc, h) - 1e-12);
    }
}
