//! Estimators, confidence intervals and verdicts for the distributional identities.
//!
//! Every campaign draws its streams from `(cfg.seed, tag)`; the tag names the check, the side and
//! the cell, so the two sides of a comparison are independent and every verdict is reproducible.

use std::fmt::Write as _;
use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::analytic::{HTransform, ScaleTable};
use crate::error::{LcbError, Result};
use crate::mechanism::Mechanism;
use crate::paths::{par_map, CbSim, DualSim, Path, SimConfig, Status};
use crate::rng::RngStream;

/// Two-sided level of a 3σ normal interval.
pub const DEFAULT_CLEVEL: f64 = 0.9973002039367398;

/// Compensated (Neumaier) running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn neumaier_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = Neumaier::default();
    for x in xs {
        s.add(x);
    }
    s.value()
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

/// Critical value for `m` simultaneous two-sided comparisons at the family level of one 3σ test.
pub fn bonferroni_z(m: usize) -> f64 {
    if m <= 1 {
        return 3.0;
    }
    let alpha = (1.0 - DEFAULT_CLEVEL) / m as f64;
    normal_quantile(1.0 - 0.5 * alpha)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub clevel: f64,
}

impl McEstimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return McEstimate { mean: f64::NAN, stderr: f64::NAN, n, clevel: DEFAULT_CLEVEL };
        }
        let mean = neumaier_sum(xs.iter().copied()) / n as f64;
        let ss = neumaier_sum(xs.iter().map(|x| (x - mean) * (x - mean)));
        let var = if n > 1 { ss / (n - 1) as f64 } else { 0.0 };
        McEstimate { mean, stderr: (var / n as f64).sqrt(), n, clevel: DEFAULT_CLEVEL }
    }

    pub fn z(&self) -> f64 {
        normal_quantile(0.5 + 0.5 * self.clevel)
    }

    pub fn interval(&self) -> (f64, f64) {
        let w = self.z() * self.stderr;
        (self.mean - w, self.mean + w)
    }
}

/// Standard error from `batches` contiguous sub-campaigns divided by the pooled one.
pub fn batch_se_ratio(xs: &[f64], batches: usize) -> f64 {
    let pooled = McEstimate::from_samples(xs).stderr;
    let size = xs.len() / batches;
    if size == 0 || pooled == 0.0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..batches).map(|b| McEstimate::from_samples(&xs[b * size..(b + 1) * size]).mean).collect();
    let e = McEstimate::from_samples(&means);
    // Standard deviation of batch means scaled down to the full sample.
    e.stderr / pooled
}

/// Kolmogorov survival function `P(K > λ)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

fn ks_p(d: f64, ne: f64) -> f64 {
    let r = ne.sqrt();
    kolmogorov_q((r + 0.12 + 0.11 / r) * d)
}

/// One-sample KS statistic and asymptotic p-value.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> (f64, f64) {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    (d, ks_p(d, n))
}

/// Two-sample KS statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    (d, ks_p(d, n * m / (n + m)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Side {
    Estimate(McEstimate),
    Exact(f64),
}

impl Side {
    pub fn mean(&self) -> f64 {
        match self {
            Side::Estimate(e) => e.mean,
            Side::Exact(v) => *v,
        }
    }

    pub fn stderr(&self) -> f64 {
        match self {
            Side::Estimate(e) => e.stderr,
            Side::Exact(_) => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: String,
    pub cell: String,
    pub lhs: Side,
    pub rhs: Side,
    pub pass: bool,
    /// Joint-SE units for comparisons, a p-value for KS tests, a count for counting criteria.
    pub margin: f64,
    pub criterion: String,
    pub detail: String,
}

impl Verdict {
    pub const CSV_HEADER: &'static str = "name,cell,lhs_mean,lhs_se,rhs_mean,rhs_se,margin,criterion,pass,detail";

    pub fn csv_row(&self) -> String {
        format!(
            "{},\"{}\",{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},\"{}\",{},\"{}\"",
            self.name,
            self.cell,
            self.lhs.mean(),
            self.lhs.stderr(),
            self.rhs.mean(),
            self.rhs.stderr(),
            self.margin,
            self.criterion,
            self.pass,
            self.detail.replace('"', "'")
        )
    }

    pub fn report_line(&self) -> String {
        format!(
            "{} {} [{}] lhs {} ± {:.2e} rhs {} ± {:.2e} margin {} ({}) {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.cell,
            num(self.lhs.mean()),
            self.lhs.stderr(),
            num(self.rhs.mean()),
            self.rhs.stderr(),
            num(self.margin),
            self.criterion,
            self.detail
        )
    }
}

/// Fixed notation in `[1e-3, 1e5)`, scientific otherwise.
fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-3..1e5).contains(&a) {
        format!("{x:.6}")
    } else {
        format!("{x:.4e}")
    }
}

pub fn verdicts_csv(vs: &[Verdict]) -> String {
    let mut out = String::from(Verdict::CSV_HEADER);
    out.push('\n');
    for v in vs {
        out.push_str(&v.csv_row());
        out.push('\n');
    }
    out
}

/// `|lhs − rhs| < z·joint SE + bar`.
pub fn compare(name: &str, cell: String, lhs: Side, rhs: Side, z: f64, bar: f64) -> Verdict {
    let diff = (lhs.mean() - rhs.mean()).abs();
    let se = lhs.stderr().hypot(rhs.stderr());
    let excess = (diff - bar).max(0.0);
    let margin = if se > 0.0 {
        excess / se
    } else if excess <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    let criterion = if bar > 0.0 { format!("|Δ| < {z:.3} SE + {bar:.2e}") } else { format!("|Δ| < {z:.3} SE") };
    Verdict { name: name.into(), cell, lhs, rhs, pass: margin < z, margin, criterion, detail: String::new() }
}

/// One-sided: `lhs` below `rhs` by more than `z` standard errors.
pub fn strictly_below(name: &str, cell: String, lhs: Side, rhs: Side, z: f64) -> Verdict {
    let se = lhs.stderr().hypot(rhs.stderr());
    let margin = if se > 0.0 { (rhs.mean() - lhs.mean()) / se } else { f64::NAN };
    Verdict {
        name: name.into(),
        cell,
        lhs,
        rhs,
        pass: margin > z,
        margin,
        criterion: format!("lhs < rhs by > {z:.3} SE"),
        detail: String::new(),
    }
}

fn exact_pair(name: &str, cell: String, a: f64, b: f64) -> Verdict {
    compare(name, cell, Side::Exact(a), Side::Exact(b), 3.0, 0.0)
}

fn require_h(mech: &Mechanism) -> Result<()> {
    match mech.classify().h_holds.value {
        Some(true) => Ok(()),
        Some(false) => Err(LcbError::HypothesisNotEstablished("false".into())),
        None => Err(LcbError::HypothesisNotEstablished("undetermined".into())),
    }
}

fn horizon(cfg: &SimConfig, t: f64, checkpoints: Vec<f64>) -> SimConfig {
    SimConfig { t_max: t, checkpoints, record: false, ..cfg.clone() }
}

/// Runs `n` paths and maps each to a sample; errors from any path abort the campaign.
fn campaign<F>(n: usize, seed: u64, tag: &str, f: F) -> Result<Vec<f64>>
where
    F: Fn(&mut RngStream) -> Result<f64> + Sync + Send,
{
    par_map(n, seed, tag, |_, rng| f(rng)).into_iter().collect()
}

fn paths<F>(n: usize, seed: u64, tag: &str, f: F) -> Result<Vec<Path>>
where
    F: Fn(&mut RngStream) -> Result<Path> + Sync + Send,
{
    par_map(n, seed, tag, |_, rng| f(rng)).into_iter().collect()
}

fn est(xs: &[f64]) -> Side {
    Side::Estimate(McEstimate::from_samples(xs))
}

fn with_batches(mut v: Verdict, xs: &[f64]) -> Verdict {
    let r = batch_se_ratio(xs, 10);
    if !v.detail.is_empty() {
        v.detail.push_str("; ");
    }
    let _ = write!(v.detail, "batch SE ratio {r:.2}");
    v
}

/// `E_z e^{−xZ_t}` against `E_x e^{−zU_t}`.
pub fn check_laplace_duality(mech: &Mechanism, cfg: &SimConfig, z: f64, x: f64, t: f64) -> Result<Verdict> {
    require_h(mech)?;
    let cell = format!("z={z} x={x} t={t}");
    if t == 0.0 {
        return Ok(exact_pair("laplace-duality", cell, (-x * z).exp(), (-x * z).exp()));
    }
    let c = horizon(cfg, t, vec![]);
    let zs = CbSim::lcb(mech, &c)?;
    let us = DualSim::u(mech, &c)?;
    let tag = format!("laplace-duality/{cell}");
    let l = campaign(c.n_paths, c.seed, &format!("{tag}/lcb"), |r| Ok((-x * zs.run(z, r)?.end_value).exp()))?;
    let rr = campaign(c.n_paths, c.seed, &format!("{tag}/u"), |r| Ok((-z * us.run(x, r)?.end_value).exp()))?;
    Ok(with_batches(compare("laplace-duality", cell, est(&l), est(&rr), 3.0, 0.0), &l))
}

/// `P_x(U_t < y)` against `P_y(x < V_t)`.
pub fn check_siegmund_duality(mech: &Mechanism, cfg: &SimConfig, x: f64, y: f64, t: f64) -> Result<Verdict> {
    require_h(mech)?;
    let cell = format!("x={x} y={y} t={t}");
    let ind = |b: bool| if b { 1.0 } else { 0.0 };
    if t == 0.0 {
        return Ok(exact_pair("siegmund-duality", cell, ind(x < y), ind(x < y)));
    }
    let c = horizon(cfg, t, vec![]);
    let us = DualSim::u(mech, &c)?;
    let vs = DualSim::v(mech, &c)?;
    let tag = format!("siegmund-duality/{cell}");
    let l = campaign(c.n_paths, c.seed, &format!("{tag}/u"), |r| Ok(ind(us.run(x, r)?.end_value < y)))?;
    let rr = campaign(c.n_paths, c.seed, &format!("{tag}/v"), |r| Ok(ind(x < vs.run(y, r)?.end_value)))?;
    Ok(with_batches(compare("siegmund-duality", cell, est(&l), est(&rr), 3.0, 0.0), &l))
}

/// `E_z e^{−xZ_t}` against `∫ z e^{−zy} P_y(V_t > x) dy`, the latter with `V_0 ~ Exp(z)` per path.
pub fn check_biduality(mech: &Mechanism, cfg: &SimConfig, z: f64, x: f64, t: f64) -> Result<Verdict> {
    require_h(mech)?;
    let cell = format!("z={z} x={x} t={t}");
    if t == 0.0 {
        return Ok(exact_pair("biduality", cell, (-x * z).exp(), (-x * z).exp()));
    }
    let c = horizon(cfg, t, vec![]);
    let zs = CbSim::lcb(mech, &c)?;
    let vs = DualSim::v(mech, &c)?;
    let tag = format!("biduality/{cell}");
    let l = campaign(c.n_paths, c.seed, &format!("{tag}/lcb"), |r| Ok((-x * zs.run(z, r)?.end_value).exp()))?;
    let rr = campaign(c.n_paths, c.seed, &format!("{tag}/v"), |r| {
        let y0 = r.exponential(1.0 / z);
        Ok(if vs.run(y0, r)?.end_value > x { 1.0 } else { 0.0 })
    })?;
    Ok(with_batches(compare("biduality", cell, est(&l), est(&rr), 3.0, 0.0), &l))
}

/// `E_z h(Z_t) < h(z)` at each `t`, plus the dual form `E_z h(Z_t) = ∫ z e^{−zy} E_y S(V_t) dy`.
pub fn check_h_supermartingale(ht: &HTransform, cfg: &SimConfig, z: f64, t_list: &[f64]) -> Result<Vec<Verdict>> {
    let mech = ht.mech();
    let hz = ht.h(z);
    let mut out = Vec::new();
    let ts: Vec<f64> = t_list.iter().copied().filter(|&t| t > 0.0).collect();
    for &t in t_list.iter().filter(|&&t| t == 0.0) {
        out.push(exact_pair("h-supermartingale", format!("z={z} t={t}"), hz, hz));
    }
    let Some(&tmax) = ts.iter().max_by(|a, b| a.total_cmp(b)) else {
        return Ok(out);
    };
    let c = horizon(cfg, tmax, ts.clone());
    let zs = CbSim::lcb(mech, &c)?;
    let vs = DualSim::v(mech, &c)?;
    let tag = format!("h-supermartingale/z={z}");
    let zp = paths(c.n_paths, c.seed, &format!("{tag}/lcb"), |r| zs.run(z, r))?;
    let vp = paths(c.n_paths, c.seed, &format!("{tag}/v"), |r| {
        let y0 = r.exponential(1.0 / z);
        vs.run(y0, r)
    })?;
    let zc = bonferroni_z(ts.len());
    for (i, &t) in ts.iter().enumerate() {
        let hv: Vec<f64> = zp.iter().map(|p| ht.h(p.checkpoints[i])).collect();
        // S diverges only logarithmically at 0; a truncated V sitting exactly at 0 is read at the smallest normal.
        let sv: Vec<f64> = vp
            .iter()
            .map(|p| {
                let v = p.checkpoints[i];
                if v.is_infinite() {
                    0.0
                } else {
                    ht.scale.s(v.max(f64::MIN_POSITIVE))
                }
            })
            .collect();
        let cell = format!("z={z} t={t}");
        let mut v = strictly_below("h-supermartingale", cell.clone(), est(&hv), Side::Exact(hz), 3.0);
        v.detail = format!("decrease h(z) − E h(Z_t) = {:.4e} (ℓ = {:.4e})", hz - v.lhs.mean(), ht.ell);
        out.push(with_batches(v, &hv));
        out.push(compare("h-dual-representation", cell, est(&hv), est(&sv), zc, 0.0));
    }
    Ok(out)
}

/// Empirical `P↑_z(inf Z ≤ a)` against `h(a)/h(z)`.
///
/// Paths still alive at the horizon may go lower later; their share is carried as a one-sided bar.
pub fn check_infimum_law(ht: Arc<HTransform>, cfg: &SimConfig, z: f64, a_list: &[f64]) -> Result<Vec<Verdict>> {
    let hz = ht.h(z);
    let c = horizon(cfg, cfg.t_max, vec![]);
    let sim = CbSim::conditioned(ht.clone(), &c)?;
    let ps = paths(c.n_paths, c.seed, &format!("infimum-law/z={z}"), |r| sim.run(z, r))?;
    let n = ps.len() as f64;
    let zc = bonferroni_z(a_list.len());
    let mut out = Vec::new();
    for &a in a_list {
        let cell = format!("z={z} a={a}");
        let want = if a >= z { 1.0 } else { ht.h(a.max(0.0)) / hz };
        let ind: Vec<f64> = ps.iter().map(|p| if p.running_inf <= a { 1.0 } else { 0.0 }).collect();
        let open = ps.iter().filter(|p| p.alive() && p.running_inf > a).count() as f64 / n;
        let e = McEstimate::from_samples(&ind);
        // Only the upper side carries the censoring bar.
        let lo = e.mean - zc * e.stderr;
        let hi = e.mean + open + zc * e.stderr;
        let margin = if want < e.mean {
            (e.mean - want) / e.stderr
        } else if want > e.mean + open {
            (want - e.mean - open) / e.stderr
        } else {
            0.0
        };
        out.push(Verdict {
            name: "infimum-law".into(),
            cell,
            lhs: Side::Estimate(e),
            rhs: Side::Exact(want),
            pass: want >= lo && want <= hi,
            margin,
            criterion: format!("within {zc:.3} SE, censoring bar {open:.2e}"),
            detail: format!("alive at horizon {:.2e}", ps.iter().filter(|p| p.alive()).count() as f64 / n),
        });
    }
    Ok(out)
}

/// `E_z e^{−θJ}` from long-horizon paths against `f_θ(z)/f_θ(0)`, or `e^{−zΨ⁻¹(θ)}` when `c = 0`.
pub fn check_progeny_lt(
    mech: &Mechanism,
    scale: Option<&ScaleTable>,
    cfg: &SimConfig,
    z: f64,
    theta_list: &[f64],
) -> Result<Vec<Verdict>> {
    let c = horizon(cfg, cfg.t_max, vec![]);
    let sim = CbSim::lcb(mech, &c)?;
    let ps = paths(c.n_paths, c.seed, &format!("progeny/z={z}"), |r| sim.run(z, r))?;
    let n = ps.len() as f64;
    let tail = c.extinction_floor / sim.gamma_eff().abs().max(1e-300);
    let zc = bonferroni_z(theta_list.len());
    let mut out = Vec::new();
    for &theta in theta_list {
        let want = if mech.c == 0.0 {
            (-z * mech.psi_inverse(theta)?).exp()
        } else {
            let s = scale.ok_or_else(|| LcbError::InvalidConfig("the progeny check needs a scale table when c > 0".into()))?;
            s.f_theta(theta, z)? / s.f_theta(theta, 0.0)?
        };
        let xs: Vec<f64> = ps.iter().map(|p| (-theta * p.progeny).exp()).collect();
        let mut bar = Neumaier::default();
        for (p, x) in ps.iter().zip(&xs) {
            match p.status {
                Status::AliveAtHorizon => bar.add(*x),
                Status::ExtinctNumerically => bar.add(theta * tail),
                _ => {}
            }
        }
        let cell = format!("z={z} θ={theta}");
        let mut v = compare("progeny-laplace", cell, est(&xs), Side::Exact(want), zc, bar.value() / n);
        v.detail = format!("alive at horizon {}", ps.iter().filter(|p| p.alive()).count());
        out.push(with_batches(v, &xs));
    }
    Ok(out)
}

/// Lifetimes of the conditioned CB (`c = 0`) against Exp(ρ); no killing at all when critical.
pub fn check_lifetime_exponential(mech: &Mechanism, cfg: &SimConfig, z: f64) -> Result<Vec<Verdict>> {
    // Adding 0 turns a −0 into 0 for display.
    let rho = mech.psi_prime_at_zero() + 0.0;
    let cell = format!("z={z} ρ={rho}");
    let t_max = if rho > 0.0 { cfg.t_max.max(40.0 / rho) } else { cfg.t_max };
    let c = horizon(cfg, t_max, vec![]);
    let sim = CbSim::cb_conditioned(mech, &c)?;
    let ps = paths(c.n_paths, c.seed, &format!("lifetime/{cell}"), |r| sim.run(z, r))?;
    let killed: Vec<f64> = ps.iter().filter(|p| p.status == Status::Killed).map(|p| p.lifetime).collect();
    let other = ps.iter().filter(|p| !matches!(p.status, Status::Killed | Status::AliveAtHorizon)).count();
    if rho == 0.0 {
        let k = killed.len() as f64;
        return Ok(vec![Verdict {
            name: "lifetime-critical".into(),
            cell,
            lhs: Side::Exact(k),
            rhs: Side::Exact(0.0),
            pass: k == 0.0 && other == 0,
            margin: k,
            criterion: "no killed paths".into(),
            detail: format!("{} paths to horizon {t_max}, {other} other terminal", ps.len()),
        }]);
    }
    let (d, p) = ks_one_sample(&killed, |x| -(-rho * x).exp_m1());
    let ks = Verdict {
        name: "lifetime-ks".into(),
        cell: cell.clone(),
        lhs: Side::Exact(d),
        rhs: Side::Exact(0.0),
        pass: p > 0.01 && other == 0,
        margin: p,
        criterion: "KS p > 0.01".into(),
        detail: format!("{} killed, {} censored, {other} other terminal", killed.len(), ps.len() - killed.len() - other),
    };
    let mean = compare("lifetime-mean", cell, est(&killed), Side::Exact(1.0 / rho), 3.0, 0.0);
    Ok(vec![ks, mean])
}

/// Killed with positive probability when the log-moment is finite; otherwise never killed, and
/// every exploding path passes all dyadic levels in order.
///
/// The branch follows the jump measure, not `ht.ell`, so an injected `ℓ` is caught.
pub fn check_killing_dichotomy(ht: Arc<HTransform>, cfg: &SimConfig, z: f64) -> Result<Vec<Verdict>> {
    let finite_log = ht.mech().pi.log_moment_finite();
    let t = cfg.t_max;
    let cps = vec![0.25 * t, 0.5 * t, t];
    let c = horizon(cfg, t, cps.clone());
    let sim = CbSim::conditioned(ht.clone(), &c)?;
    let ps = paths(c.n_paths, c.seed, &format!("killing-dichotomy/z={z}"), |r| sim.run(z, r))?;
    let n = ps.len() as f64;
    let killed: Vec<&Path> = ps.iter().filter(|p| p.status == Status::Killed).collect();
    let alive_at: Vec<String> = (0..cps.len())
        .map(|i| {
            let a = ps.iter().filter(|p| p.lifetime > cps[i]).count() as f64 / n;
            format!("{:.3}:{a:.3e}", cps[i])
        })
        .collect();
    let detail = format!("alive fraction by t {}", alive_at.join(" "));
    let cell = format!("z={z} ℓ={:.4e}", ht.ell);
    if finite_log {
        let ind: Vec<f64> = ps.iter().map(|p| if p.status == Status::Killed { 1.0 } else { 0.0 }).collect();
        let e = McEstimate::from_samples(&ind);
        let finite = killed.iter().all(|p| p.last_finite.is_finite());
        let margin = if e.stderr > 0.0 { e.mean / e.stderr } else { 0.0 };
        return Ok(vec![Verdict {
            name: "killing-dichotomy".into(),
            cell,
            lhs: Side::Estimate(e),
            rhs: Side::Exact(0.0),
            pass: margin > 3.0 && finite,
            margin,
            criterion: "killed fraction > 0 by 3 SE, finite pre-kill values".into(),
            detail: format!("{detail}; pre-kill values finite: {finite}"),
        }]);
    }
    let exploding: Vec<&Path> = ps.iter().filter(|p| p.status == Status::Exploded).collect();
    let ordered = exploding.iter().all(|p| {
        p.levels.iter().all(|l| l.1 <= p.lifetime) && p.levels.windows(2).all(|w| w[0].1 <= w[1].1)
    });
    let k = killed.len() as f64;
    Ok(vec![Verdict {
        name: "killing-dichotomy".into(),
        cell,
        lhs: Side::Exact(k),
        rhs: Side::Exact(0.0),
        pass: k == 0.0 && ordered,
        margin: k,
        criterion: "no killed paths, exploding paths pass every dyadic level in order".into(),
        detail: format!("{detail}; {} exploded, levels ordered: {ordered}", exploding.len()),
    }])
}

/// Bounded functionals used by the two-construction comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TestFunction {
    Laplace(f64),
    Indicator(f64, f64),
}

impl TestFunction {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            TestFunction::Laplace(x) => (-x * z).exp(),
            TestFunction::Indicator(lo, hi) => {
                if z > lo && z < hi {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            TestFunction::Laplace(x) => format!("exp(-{x}z)"),
            TestFunction::Indicator(lo, hi) => format!("1({lo}<z<{hi})"),
        }
    }
}

/// `E↑_z[f(Z_t); t < ζ]` by direct simulation against `E_z[f(Z_t) h(Z_t)/h(z)]`.
pub fn check_two_constructions(
    ht: Arc<HTransform>,
    cfg: &SimConfig,
    z: f64,
    t: f64,
    fs: &[TestFunction],
) -> Result<Vec<Verdict>> {
    let cellf = |f: &TestFunction| format!("z={z} t={t} f={} dt={}", f.label(), cfg.dt);
    if t == 0.0 {
        return Ok(fs.iter().map(|f| exact_pair("two-constructions", cellf(f), f.eval(z), f.eval(z))).collect());
    }
    let c = horizon(cfg, t, vec![]);
    let up = CbSim::conditioned(ht.clone(), &c)?;
    let lcb = CbSim::lcb(ht.mech(), &c)?;
    let tag = format!("two-constructions/z={z} t={t}");
    let a = paths(c.n_paths, c.seed, &format!("{tag}/conditioned"), |r| up.run(z, r))?;
    let b = par_map(c.n_paths, c.seed, &format!("{tag}/weighted"), |_, r| lcb.run_weighted(&ht, z, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for f in fs {
        let l: Vec<f64> = a.iter().map(|p| if p.alive() { f.eval(p.end_value) } else { 0.0 }).collect();
        let r: Vec<f64> = b.iter().map(|(p, w)| if *w > 0.0 { w * f.eval(p.end_value) } else { 0.0 }).collect();
        out.push(with_batches(compare("two-constructions", cellf(f), est(&l), est(&r), 3.0, 0.0), &l));
    }
    Ok(out)
}

/// Starting points approaching 0, then the boundary itself.
pub const ENTRANCE_STARTS: [f64; 4] = [0.1, 0.01, 0.001, 0.0];

/// `E↑_z e^{−xZ_t}` for `z ↓ 0` against the process started at 0, and `E↑_0 e^{−x'Z_t'} < 1`.
pub fn check_entrance_from_zero(
    ht: Arc<HTransform>,
    cfg: &SimConfig,
    x: f64,
    t: f64,
    x_big: f64,
    t_small: f64,
) -> Result<Vec<Verdict>> {
    let c = horizon(cfg, t, vec![]);
    let sim = CbSim::conditioned(ht.clone(), &c)?;
    let mut sides = Vec::new();
    for &z in &ENTRANCE_STARTS {
        let xs = campaign(c.n_paths, c.seed, &format!("entrance/z={z} x={x} t={t}"), |r| {
            let p = sim.run(z, r)?;
            Ok(if p.alive() { (-x * p.end_value).exp() } else { 0.0 })
        })?;
        sides.push(est(&xs));
    }
    let zc = bonferroni_z(2);
    let mut out = Vec::new();
    let first = compare("entrance-cauchy", format!("z=0.1 vs 0.01 x={x} t={t}"), sides[0], sides[1], zc, 0.0);
    let mut last = compare("entrance-cauchy", format!("z=0.01 vs 0.001 x={x} t={t}"), sides[1], sides[2], zc, 0.0);
    last.detail = format!("first difference {:.3e} (margin {:.2})", sides[0].mean() - sides[1].mean(), first.margin);
    out.push(last);
    out.push(compare("entrance-limit", format!("z=0.001 vs 0 x={x} t={t}"), sides[2], sides[3], zc, 0.0));
    let c2 = horizon(cfg, t_small, vec![]);
    let sim2 = CbSim::conditioned(ht, &c2)?;
    let xs = campaign(c2.n_paths, c2.seed, &format!("entrance/strict x={x_big} t={t_small}"), |r| {
        let p = sim2.run(0.0, r)?;
        Ok(if p.alive() { (-x_big * p.end_value).exp() } else { 0.0 })
    })?;
    out.push(strictly_below("entrance-below-one", format!("z=0 x={x_big} t={t_small}"), est(&xs), Side::Exact(1.0), 3.0));
    Ok(out)
}

/// Ratio estimate `Σa/Σb` with a delta-method standard error.
fn ratio_estimate(a: &[f64], b: &[f64]) -> McEstimate {
    let n = a.len() as f64;
    let ma = neumaier_sum(a.iter().copied()) / n;
    let mb = neumaier_sum(b.iter().copied()) / n;
    let r = ma / mb;
    let resid: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - r * y).collect();
    let e = McEstimate::from_samples(&resid);
    McEstimate { mean: r, stderr: e.stderr / mb, n: a.len(), clevel: DEFAULT_CLEVEL }
}

/// `P_z(Z_t ∈ B, t ≤ 𝕖/θ | J ≥ 𝕖/θ)` along decreasing θ against `E_z[1_B(Z_t) h(Z_t)]/h(z)`.
///
/// The exponential clock is integrated out per path, so all θ share the same paths.
pub fn check_conditioning_limit(
    ht: Arc<HTransform>,
    cfg: &SimConfig,
    z: f64,
    t: f64,
    theta_list: &[f64],
    boxes: &[(f64, f64)],
) -> Result<Vec<Verdict>> {
    let mech = ht.mech();
    let c = horizon(cfg, cfg.t_max.max(t), vec![t]);
    let sim = CbSim::lcb(mech, &c)?;
    let ps = paths(c.n_paths, c.seed, &format!("conditioning-limit/z={z} t={t}"), |r| sim.run(z, r))?;
    let cw = horizon(cfg, t, vec![]);
    let lcb = CbSim::lcb(mech, &cw)?;
    let wp = par_map(cw.n_paths, cw.seed, &format!("conditioning-limit/z={z} t={t}/weighted"), |_, r| {
        lcb.run_weighted(&ht, z, r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let alive = ps.iter().filter(|p| p.alive()).count();
    let mut thetas = theta_list.to_vec();
    thetas.sort_by(|a, b| b.total_cmp(a));
    let mut out = Vec::new();
    for &(lo, hi) in boxes {
        let f = TestFunction::Indicator(lo, hi);
        let target: Vec<f64> = wp.iter().map(|(p, w)| w * f.eval(p.end_value)).collect();
        let mut trend = Vec::new();
        let mut end = None;
        for &th in &thetas {
            let num: Vec<f64> =
                ps.iter().map(|p| f.eval(p.checkpoints[0]) * ((-th * t).exp() - (-th * p.progeny).exp()).max(0.0)).collect();
            let den: Vec<f64> = ps.iter().map(|p| -(-th * p.progeny).exp_m1()).collect();
            let e = ratio_estimate(&num, &den);
            trend.push(format!("{th}:{:.4}", e.mean));
            end = Some(e);
        }
        let Some(e) = end else {
            return Err(LcbError::InvalidConfig("empty θ list".into()));
        };
        let mut v = compare(
            "conditioning-limit",
            format!("z={z} t={t} B=({lo},{hi}) θ={}", thetas.last().copied().unwrap_or(f64::NAN)),
            Side::Estimate(e),
            est(&target),
            3.0,
            0.0,
        );
        v.detail = format!("trend {}; alive at horizon {alive}", trend.join(" "));
        out.push(v);
    }
    Ok(out)
}

/// Same configuration with the step halved.
pub fn half_dt(cfg: &SimConfig) -> SimConfig {
    SimConfig { dt: 0.5 * cfg.dt, ..cfg.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neumaier_recovers_cancelled_terms() {
        let xs = [1.0, 1e100, 1.0, -1e100];
        assert_eq!(neumaier_sum(xs), 2.0);
    }

    #[test]
    fn bonferroni_reduces_to_three_sigma() {
        assert_eq!(bonferroni_z(1), 3.0);
        assert!((normal_quantile(0.5 + 0.5 * DEFAULT_CLEVEL) - 3.0).abs() < 1e-9);
        assert!(bonferroni_z(5) > 3.4 && bonferroni_z(5) < 3.5);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // Classical critical values: P(K > 1.3581) = 0.05, P(K > 1.6276) = 0.01.
        assert!((kolmogorov_q(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_q(1.6276) - 0.01).abs() < 1e-4);
    }

    #[test]
    fn ks_statistics_on_small_samples() {
        let (d, _) = ks_one_sample(&[0.1, 0.4, 0.7], |x| x);
        assert!((d - 0.3).abs() < 1e-15);
        let (d2, _) = ks_two_sample(&[1.0, 2.0, 3.0], &[1.5, 2.5, 3.5]);
        assert!((d2 - 1.0 / 3.0).abs() < 1e-15);
    }
}
