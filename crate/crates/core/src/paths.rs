//! Path simulators: the Lévy process Y, the GOU process with its Lamperti time change, the LCB
//! itself, the dual diffusions U, V and V↓, the conditioned process Z↑ and the conditioned CB.

use crate::analytic::{integrate_log_tail, HTransform, ScaleTable, LOG_TAIL_S_MAX};
use crate::error::{LcbError, Result};
use crate::mechanism::{stable_weight, JumpMeasure, JumpSplit, Mechanism, PsiTable};
use crate::quad::{integrate, QuadOpts};
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::sync::Arc;

/// Hard ceiling on steps per path.
pub const MAX_STEPS: u64 = 100_000_000;
/// Largest fraction of the local drift time scale taken in one step.
const REL_STEP: f64 = 0.05;
/// Consecutive steps below the extinction floor before a path is declared extinct.
pub const FLOOR_STEPS: u32 = 10;
/// Ceiling for the state of a process that comes down from infinity.
const HUGE: f64 = 1e300;
/// Dual diffusions use the exact squared-Bessel step while `2x/(c h)` is below this.
const BESQ_SWITCH: f64 = 50.0;
/// Largest `ln y` of sampled immigration jumps for density kinds.
const SAMPLER_S_MAX: f64 = 690.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmallJumpMode {
    Discard,
    GaussianCompensate,
    /// Gaussian when `∫_0^ε y²π(dy) > 0.01 σ²`.
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffusionScheme {
    EulerFullTruncation,
    MilsteinFullTruncation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    pub eps_jump: f64,
    pub t_max: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub small_jump_mode: SmallJumpMode,
    pub diffusion_scheme: DiffusionScheme,
    pub explosion_cap: f64,
    pub extinction_floor: f64,
    /// Times in `[0, t_max]` at which `Path::checkpoints` are recorded.
    pub checkpoints: Vec<f64>,
    /// Keep the whole trajectory in `Path::times` / `Path::values`.
    pub record: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-3,
            eps_jump: 0.01,
            t_max: 1.0,
            n_paths: 1000,
            seed: 1,
            small_jump_mode: SmallJumpMode::Auto,
            diffusion_scheme: DiffusionScheme::EulerFullTruncation,
            explosion_cap: 1e9,
            extinction_floor: 1e-9,
            checkpoints: Vec::new(),
            record: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LcbError::InvalidConfig(m.into()));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt must be positive");
        }
        if !(self.eps_jump > 0.0 && self.eps_jump < 1.0) {
            return bad("eps_jump must lie in (0, 1)");
        }
        if !(self.t_max > 0.0 && self.t_max.is_finite()) {
            return bad("t_max must be positive and finite");
        }
        if !(self.extinction_floor > 0.0 && self.extinction_floor < 1.0 && self.explosion_cap > 1.0) {
            return bad("need 0 < extinction_floor < 1 < explosion_cap");
        }
        if self.n_paths == 0 {
            return bad("n_paths must be positive");
        }
        let mut prev = 0.0;
        for &c in &self.checkpoints {
            if !(c >= prev && c <= self.t_max) {
                return bad("checkpoints must be sorted within [0, t_max]");
            }
            prev = c;
        }
        Ok(())
    }

    pub fn gaussian_small_jumps(&self, split: &JumpSplit, sigma: f64) -> bool {
        match self.small_jump_mode {
            SmallJumpMode::Discard => false,
            SmallJumpMode::GaussianCompensate => true,
            SmallJumpMode::Auto => split.small_var > 0.01 * sigma * sigma,
        }
    }

    fn milstein(&self) -> bool {
        self.diffusion_scheme == DiffusionScheme::MilsteinFullTruncation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    AliveAtHorizon,
    AbsorbedZero,
    ExtinctNumerically,
    Killed,
    Exploded,
}

impl Status {
    pub const ALL: [Status; 5] =
        [Status::AliveAtHorizon, Status::AbsorbedZero, Status::ExtinctNumerically, Status::Killed, Status::Exploded];

    pub fn flag(self) -> u8 {
        self as u8
    }

    pub fn is_terminal(self) -> bool {
        self != Status::AliveAtHorizon
    }

    /// Value carried after the status is reached.
    pub fn terminal_value(self) -> f64 {
        match self {
            Status::AbsorbedZero | Status::ExtinctNumerically => 0.0,
            Status::Killed | Status::Exploded => f64::INFINITY,
            Status::AliveAtHorizon => f64::NAN,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::AliveAtHorizon => "alive-at-horizon",
            Status::AbsorbedZero => "absorbed-zero",
            Status::ExtinctNumerically => "extinct-numerically",
            Status::Killed => "killed",
            Status::Exploded => "exploded",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Full trajectory, only when `SimConfig::record` is set.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Values at `SimConfig::checkpoints`.
    pub checkpoints: Vec<f64>,
    pub status: Status,
    /// Time the status became terminal, `∞` if alive at the horizon.
    pub lifetime: f64,
    /// Value at the horizon, or the terminal value.
    pub end_value: f64,
    /// Last finite value before a kill or explosion (the end value otherwise).
    pub last_finite: f64,
    pub weight: Option<f64>,
    /// `∫ Z ds` up to the horizon or lifetime.
    pub progeny: f64,
    /// Running infimum before the lifetime.
    pub running_inf: f64,
    /// `(2^j, first passage time above it)` for the dyadic levels between the start and the cap.
    pub levels: Vec<(f64, f64)>,
    pub steps: u64,
}

impl Path {
    pub fn alive(&self) -> bool {
        self.status == Status::AliveAtHorizon
    }

    /// CSV with columns `t,value,status_flag`; the flag is the path's final status on the last row and 0 before.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,value,status_flag\n");
        let n = self.times.len();
        for (i, (t, v)) in self.times.iter().zip(&self.values).enumerate() {
            let flag = if i + 1 == n { self.status.flag() } else { 0 };
            let _ = writeln!(out, "{t:.17e},{v:.17e},{flag}");
        }
        out
    }
}

/// Checkpoint, trajectory and level bookkeeping shared by the simulators.
struct Tracker<'a> {
    cfg: &'a SimConfig,
    p: Path,
    next_cp: usize,
    next_level: usize,
}

impl<'a> Tracker<'a> {
    fn new(cfg: &'a SimConfig, z0: f64, levels: bool) -> Self {
        let mut lv = Vec::new();
        if levels {
            let jmax = cfg.explosion_cap.log2().floor() as i32;
            let jmin = if z0 > 0.0 { z0.log2().floor() as i32 + 1 } else { -40 };
            for j in jmin..=jmax {
                lv.push((2f64.powi(j), f64::INFINITY));
            }
        }
        let p = Path {
            times: Vec::new(),
            values: Vec::new(),
            checkpoints: Vec::with_capacity(cfg.checkpoints.len()),
            status: Status::AliveAtHorizon,
            lifetime: f64::INFINITY,
            end_value: z0,
            last_finite: z0,
            weight: None,
            progeny: 0.0,
            running_inf: z0,
            levels: lv,
            steps: 0,
        };
        let mut tr = Tracker { cfg, p, next_cp: 0, next_level: 0 };
        tr.observe(0.0, z0);
        tr
    }

    /// Next time the step must land on exactly.
    fn target(&self, t: f64) -> f64 {
        match self.cfg.checkpoints.get(self.next_cp) {
            Some(&c) if c < self.cfg.t_max => c,
            _ => self.cfg.t_max,
        }
        .max(t)
    }

    fn observe(&mut self, t: f64, z: f64) {
        if self.cfg.record {
            self.p.times.push(t);
            self.p.values.push(z);
        }
        let cps = &self.cfg.checkpoints;
        while self.next_cp < cps.len() && cps[self.next_cp] <= t {
            self.p.checkpoints.push(z);
            self.next_cp += 1;
        }
        while self.next_level < self.p.levels.len() && z >= self.p.levels[self.next_level].0 {
            self.p.levels[self.next_level].1 = t;
            self.next_level += 1;
        }
    }

    fn inf(&mut self, m: f64) {
        if m < self.p.running_inf {
            self.p.running_inf = m;
        }
    }

    fn alive(mut self, z: f64) -> Path {
        self.p.end_value = z;
        self.p.last_finite = z;
        while self.p.checkpoints.len() < self.cfg.checkpoints.len() {
            self.p.checkpoints.push(z);
        }
        self.p
    }

    fn terminate(mut self, status: Status, t: f64, last: f64) -> Path {
        let v = status.terminal_value();
        self.p.status = status;
        self.p.lifetime = t;
        self.p.end_value = v;
        self.p.last_finite = last;
        if self.cfg.record {
            self.p.times.push(t);
            self.p.values.push(v);
        }
        if status == Status::Exploded {
            for l in self.p.levels.iter_mut().skip(self.next_level) {
                l.1 = t;
            }
        }
        while self.p.checkpoints.len() < self.cfg.checkpoints.len() {
            self.p.checkpoints.push(v);
        }
        self.p
    }
}

/// Step of at most `dt` toward `target`, absorbing a leftover sliver from rounding.
fn snap(t: f64, target: f64, dt: f64) -> f64 {
    let gap = target - t;
    if gap - dt < 1e-9 * dt {
        gap
    } else {
        dt
    }
}

/// Exact flow of `dz = (a z - hc z²) dt` over time `h`.
pub fn verhulst(z: f64, a: f64, hc: f64, h: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let g = if (a * h).abs() < 1e-12 { h * (1.0 + 0.5 * a * h) } else { (a * h).exp_m1() / a };
    z * (1.0 + a * g) / (1.0 + hc * z * g)
}

/// `∫_0^h` of the Verhulst flow started at `z`.
pub fn flow_integral(z: f64, a: f64, hc: f64, h: f64) -> f64 {
    if z == 0.0 {
        return 0.0;
    }
    let g = if (a * h).abs() < 1e-12 { h * (1.0 + 0.5 * a * h) } else { (a * h).exp_m1() / a };
    if hc == 0.0 {
        z * g
    } else {
        (hc * z * g).ln_1p() / hc
    }
}

/// `∫_0^h ds / r(s)` along the flow of `dr = (a - hc r) ds`; left-point when the flow leaves `(0, ∞)`.
pub fn clock_integral(r: f64, a: f64, hc: f64, h: f64) -> f64 {
    let end = ou_flow(r, a, hc, h);
    if !(end > 0.0) {
        return h / r;
    }
    if hc == 0.0 {
        return if a == 0.0 { h / r } else { (a * h / r).ln_1p() / a };
    }
    let big_a = a / hc;
    let b = r - big_a;
    if big_a.abs() <= 1e-10 * b.abs() {
        return (hc * h).exp_m1() / (hc * b);
    }
    (h + (end / r).ln() / hc) / big_a
}

/// Root in `(0, hi]` of `f(s) = target` for increasing `f` with `f(0) = 0` and derivative `df`.
fn solve_increasing(f: &dyn Fn(f64) -> f64, df: &dyn Fn(f64) -> f64, target: f64, hi: f64) -> f64 {
    let (mut lo, mut up) = (0.0, hi);
    let mut s = (target / df(0.0).max(1e-300)).min(hi);
    for _ in 0..100 {
        let v = f(s) - target;
        if v.abs() <= 1e-15 * target {
            break;
        }
        if v > 0.0 {
            up = s;
        } else {
            lo = s;
        }
        if up - lo <= 1e-15 * up {
            break;
        }
        let d = df(s);
        let next = if d > 0.0 { s - v / d } else { f64::NAN };
        s = if next > lo && next < up { next } else { 0.5 * (lo + up) };
    }
    s.clamp(0.0, hi)
}

/// Exact flow of `dr = (a - hc r) dt` over time `h`.
fn ou_flow(r: f64, a: f64, hc: f64, h: f64) -> f64 {
    if hc == 0.0 {
        return r + a * h;
    }
    let e = (-hc * h).exp_m1();
    r + (r - a / hc) * e
}

/// `∫_0^ε y³ π(dy)`.
pub fn small_moment3(pi: &JumpMeasure, eps: f64) -> f64 {
    match pi {
        JumpMeasure::StableTail { alpha, a } => stable_weight(*alpha, *a) * eps.powf(3.0 - alpha) / (3.0 - alpha),
        JumpMeasure::NeveuImplied => 0.5 * eps * eps,
        JumpMeasure::TabulatedDensity(t) => {
            let p0 = t.points[0].0;
            if eps <= p0 {
                0.0
            } else {
                integrate(|y: f64| y * y * y * t.density(y), p0, eps, QuadOpts::rel(1e-10)).map(|r| r.value).unwrap_or(0.0)
            }
        }
        _ => 0.0,
    }
}

type Weight = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

enum Cells {
    Empty,
    Atoms { sizes: Vec<f64>, cum: Vec<f64> },
    /// Cells in a transformed variable `x` with mass density `g(x)`; `map` sends `x` back to `y`.
    Grid { edges: Vec<f64>, cum: Vec<f64>, gmax: Vec<f64>, g: Weight, map: fn(f64) -> f64 },
}

/// Sampler for the finite measure `w(y) π(dy)` on `[ε, ∞)`; mass beyond the resolved range is sampled as `∞`.
pub struct WeightedSampler {
    cells: Cells,
    /// Resolved mass.
    pub body: f64,
    /// Mass sampled as an infinite jump.
    pub far: f64,
}

fn exp_map(x: f64) -> f64 {
    x.exp()
}

fn log_tail_map(x: f64) -> f64 {
    let s = (-x).exp() - 1.0;
    if s > 700.0 {
        f64::INFINITY
    } else {
        s.exp()
    }
}

impl WeightedSampler {
    pub fn new(pi: &JumpMeasure, eps: f64, w: Weight) -> Result<Self> {
        let out = match pi {
            JumpMeasure::None => WeightedSampler { cells: Cells::Empty, body: 0.0, far: 0.0 },
            JumpMeasure::CompoundPoisson { atoms } => {
                let mut sizes = Vec::new();
                let mut cum = Vec::new();
                let mut acc = 0.0;
                for &(s, r) in atoms {
                    acc += r * w(s);
                    sizes.push(s);
                    cum.push(acc);
                }
                WeightedSampler { cells: Cells::Atoms { sizes, cum }, body: acc, far: 0.0 }
            }
            JumpMeasure::LogTail { kappa } => {
                // x = ln t with y = exp(1/t - 1); mass κ w(y) t dx.
                let k = *kappa;
                let wc = w.clone();
                let g: Weight = Arc::new(move |x: f64| {
                    let t = x.exp();
                    k * wc(log_tail_map(x)) * t
                });
                let lo = -(1.0 + LOG_TAIL_S_MAX).ln();
                let hi = -(1.0 + eps.max(1.0).ln()).ln();
                let mut s = Self::grid(lo, hi, 0.01, g, log_tail_map)?;
                let total = integrate_log_tail(k, eps, LOG_TAIL_S_MAX, |y| w(y))?;
                s.far = (total - s.body).max(0.0);
                s
            }
            _ => {
                let lo = match pi {
                    JumpMeasure::TabulatedDensity(t) => eps.max(t.points[0].0),
                    _ => eps,
                };
                let pic = pi.clone();
                let g: Weight = Arc::new(move |x: f64| {
                    let y = x.exp();
                    w(y) * pic.density(y) * y
                });
                Self::grid(lo.ln(), SAMPLER_S_MAX, 0.05, g, exp_map)?
            }
        };
        if !(out.body + out.far).is_finite() {
            return Err(LcbError::Simulation("weighted jump mass is not finite".into()));
        }
        Ok(out)
    }

    fn grid(lo: f64, hi: f64, ds: f64, g: Weight, map: fn(f64) -> f64) -> Result<Self> {
        let n = ((hi - lo) / ds).ceil().max(1.0) as usize;
        let step = (hi - lo) / n as f64;
        let mut edges = Vec::with_capacity(n + 1);
        let mut cum = Vec::with_capacity(n);
        let mut gmax = Vec::with_capacity(n);
        let mut acc = 0.0;
        let mut opts = QuadOpts { rel_tol: 1e-10, abs_tol: 1e-300, max_intervals: 200 };
        edges.push(lo);
        for i in 0..n {
            let a = lo + i as f64 * step;
            let b = if i + 1 == n { hi } else { a + step };
            let m = integrate(|x| g(x), a, b, opts).map_err(|e| LcbError::Simulation(format!("cell [{a}, {b}]: {e}")))?.value;
            acc += m;
            // Far cells only need accuracy relative to the mass already accumulated.
            opts.abs_tol = (1e-13 * acc).max(1e-300);
            edges.push(b);
            cum.push(acc);
            let peak = [0.0, 0.25, 0.5, 0.75, 1.0].iter().map(|f| g(a + f * (b - a))).fold(0.0, f64::max);
            gmax.push(1.3 * peak);
        }
        Ok(WeightedSampler { cells: Cells::Grid { edges, cum, gmax, g, map }, body: acc, far: 0.0 })
    }

    pub fn total(&self) -> f64 {
        self.body + self.far
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let u = rng.uniform() * self.total();
        if u >= self.body {
            return f64::INFINITY;
        }
        match &self.cells {
            Cells::Empty => 0.0,
            Cells::Atoms { sizes, cum } => {
                let i = cum.partition_point(|&c| c <= u).min(sizes.len() - 1);
                sizes[i]
            }
            Cells::Grid { edges, cum, gmax, g, map } => {
                let i = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
                let (a, b) = (edges[i], edges[i + 1]);
                for _ in 0..10_000 {
                    let x = a + (b - a) * rng.uniform();
                    if rng.uniform() * gmax[i] <= g(x) {
                        return map(x);
                    }
                }
                map(0.5 * (a + b))
            }
        }
    }
}

#[derive(Clone)]
enum Extra {
    Plain,
    Conditioned { ht: Arc<HTransform>, m2: f64, m3: f64, sampler: Arc<WeightedSampler>, kills: bool },
    CbConditioned { drift: f64, sampler: Arc<WeightedSampler>, rho: f64 },
}

/// Jump-adapted Euler engine for the LCB and its conditioned variants.
///
/// Between events the drift `a z - (c/2) z²` is integrated exactly and the remaining drift and
/// the square-root noise by full truncation. Jump events (branching and proposed immigration)
/// share one Exp(1) clock whose intensity is integrated along the drift flow; killing uses a
/// trapezoidal cumulative hazard.
#[derive(Clone)]
pub struct CbSim {
    pub mech: Mechanism,
    pub cfg: SimConfig,
    pub split: JumpSplit,
    pub gaussian_small: bool,
    a: f64,
    hc: f64,
    noise: f64,
    absorbing: bool,
    grey: bool,
    levels: bool,
    bridge: bool,
    comes_down: bool,
    extra: Extra,
}

impl CbSim {
    fn base(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        mech.validate()?;
        let split = mech.pi.split(cfg.eps_jump);
        let gaussian_small = cfg.gaussian_small_jumps(&split, mech.sigma);
        let noise = mech.sigma * mech.sigma + if gaussian_small { split.small_var } else { 0.0 };
        let report = mech.classify();
        let grey = report.grey.is_true();
        Ok(CbSim {
            mech: mech.clone(),
            cfg: cfg.clone(),
            split,
            gaussian_small,
            a: mech.gamma - split.compensator,
            hc: 0.5 * mech.c,
            noise,
            absorbing: true,
            grey,
            levels: false,
            bridge: false,
            // With ℰ = ∞ the LCB comes down from infinity and cannot explode.
            comes_down: mech.c > 0.0 && report.cal_e_infinite.is_true(),
            extra: Extra::Plain,
        })
    }

    /// The LCB of the mechanism.
    pub fn lcb(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        Self::base(mech, cfg)
    }

    /// The process conditioned on non-extinction, with killing at rate `k`.
    pub fn conditioned(ht: Arc<HTransform>, cfg: &SimConfig) -> Result<Self> {
        let mut s = Self::base(ht.mech(), cfg)?;
        let hh = ht.clone();
        let sampler = WeightedSampler::new(&s.mech.pi, cfg.eps_jump, Arc::new(move |y| hh.h(y)))?;
        s.absorbing = false;
        s.comes_down = false;
        s.levels = true;
        s.bridge = true;
        s.extra = Extra::Conditioned {
            m2: s.split.small_var,
            m3: small_moment3(&s.mech.pi, cfg.eps_jump),
            kills: ht.ell > 0.0,
            ht,
            sampler: Arc::new(sampler),
        };
        Ok(s)
    }

    /// The competition-free CB conditioned to survive: immigration with drift σ² and jumps `yπ(dy)`, killed at Exp(ρ).
    pub fn cb_conditioned(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        if mech.c != 0.0 {
            return Err(LcbError::InvalidConfig("the conditioned CB requires c = 0".into()));
        }
        let rho = mech.psi_prime_at_zero();
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(LcbError::InvalidConfig(format!("the conditioned CB requires 0 ≤ ρ < ∞, got {rho}")));
        }
        let mut s = Self::base(mech, cfg)?;
        let sampler = WeightedSampler::new(&mech.pi, cfg.eps_jump, Arc::new(|y| y))?;
        s.absorbing = false;
        s.comes_down = false;
        s.extra = Extra::CbConditioned {
            drift: mech.sigma * mech.sigma + s.split.small_var,
            sampler: Arc::new(sampler),
            rho,
        };
        Ok(s)
    }

    /// Effective linear drift coefficient after compensating the simulated jumps.
    pub fn gamma_eff(&self) -> f64 {
        self.a
    }

    pub fn is_grey(&self) -> bool {
        self.grey
    }

    fn extra_drift(&self, z: f64) -> f64 {
        match &self.extra {
            Extra::Plain => 0.0,
            Extra::Conditioned { ht, m2, m3, .. } => {
                let s2 = self.mech.sigma * self.mech.sigma;
                let small = (ht.h_prime(z) * m2 + 0.5 * ht.h_second(z) * m3) / ht.h_over_z(z);
                s2 * ht.b(z) + small
            }
            Extra::CbConditioned { drift, .. } => *drift,
        }
    }

    fn immigration_rate(&self, z: f64) -> f64 {
        match &self.extra {
            Extra::Plain => 0.0,
            Extra::Conditioned { ht, sampler, .. } => sampler.total() / ht.h_over_z(z),
            Extra::CbConditioned { sampler, .. } => sampler.total(),
        }
    }

    fn continuous(&self, z: f64, h: f64, rng: &mut RngStream, tr: &mut Tracker) -> f64 {
        let mut z1 = verhulst(z, self.a, self.hc, h) + self.extra_drift(z) * h;
        let v = self.noise * z * h;
        if v > 0.0 {
            let n = rng.normal();
            z1 += v.sqrt() * n;
            if self.cfg.milstein() {
                z1 += 0.25 * self.noise * h * (n * n - 1.0);
            }
            if self.bridge {
                // Minimum of the Brownian bridge between the endpoints.
                let e = z1.max(0.0);
                let d = e - z;
                let m = 0.5 * (z + e - (d * d - 2.0 * v * rng.uniform().ln()).sqrt());
                tr.inf(m.max(0.0));
            }
        }
        tr.inf(z1.max(0.0));
        z1
    }

    pub fn run(&self, z0: f64, rng: &mut RngStream) -> Result<Path> {
        if !(z0 >= 0.0 && z0.is_finite()) {
            return Err(LcbError::InvalidConfig(format!("start must be finite and nonnegative, got {z0}")));
        }
        let cfg = &self.cfg;
        let mut tr = Tracker::new(cfg, z0, self.levels);
        let mut t = 0.0;
        let mut z = z0;
        let mut e_jump = rng.exp1();
        let e_kill = rng.exp1();
        let mut hazard = 0.0;
        let kill_time = match &self.extra {
            Extra::CbConditioned { rho, .. } if *rho > 0.0 => rng.exponential(1.0 / rho),
            _ => f64::INFINITY,
        };
        let mut below = 0u32;
        let mut progeny = 0.0;
        let mut steps = 0u64;
        loop {
            let target = tr.target(t);
            if t >= cfg.t_max {
                break;
            }
            steps += 1;
            if steps > MAX_STEPS {
                return Err(LcbError::Simulation(format!("step budget exhausted at t = {t}, z = {z}")));
            }
            let mut h = snap(t, target, cfg.dt);
            let scale = self.hc * z + self.a.abs();
            if scale > 0.0 {
                h = h.min(REL_STEP / scale);
            }
            if kill_time < t + h {
                h = (kill_time - t).max(0.0);
            }
            // Event intensity integrated along the drift flow: exact for branching, linear in time for immigration.
            let li0 = self.immigration_rate(z);
            let li1 = if li0 > 0.0 { self.immigration_rate(verhulst(z, self.a, self.hc, h)) } else { 0.0 };
            let hh = h;
            let cum = |s: f64| self.split.rate * flow_integral(z, self.a, self.hc, s) + li0 * s + 0.5 * (li1 - li0) * s * s / hh;
            let rate_at = |s: f64| self.split.rate * verhulst(z, self.a, self.hc, s) + li0 + (li1 - li0) * s / hh;
            let jump = cum(h) >= e_jump;
            if jump {
                h = solve_increasing(&cum, &rate_at, e_jump, h);
            } else {
                e_jump -= cum(h);
            }
            let lam_b = self.split.rate * verhulst(z, self.a, self.hc, h);
            let lam = rate_at(h);
            let z1 = self.continuous(z, h, rng, &mut tr);
            let z1p = z1.max(0.0);
            let flow = verhulst(z, self.a, self.hc, h);
            let dj = flow_integral(z, self.a, self.hc, h) + 0.5 * (z1p - flow) * h;
            progeny += dj;
            if let Extra::Conditioned { ht, kills: true, .. } = &self.extra {
                let dk = 0.5 * (ht.k(z) + ht.k(z1p)) * h;
                if hazard + dk >= e_kill {
                    let f = ((e_kill - hazard) / dk).clamp(0.0, 1.0);
                    let zk = z + f * (z1p - z);
                    tr.p.progeny = progeny - dj * (1.0 - f);
                    tr.p.steps = steps;
                    return Ok(tr.terminate(Status::Killed, t + f * h, zk));
                }
                hazard += dk;
            }
            t = if t + h >= target || h == target - t { target } else { t + h };
            z = z1p;
            if z1 <= 0.0 && self.absorbing {
                tr.p.progeny = progeny;
                tr.p.steps = steps;
                let st = if self.grey { Status::AbsorbedZero } else { Status::ExtinctNumerically };
                return Ok(tr.terminate(st, t, 0.0));
            }
            let pre = z;
            if jump {
                e_jump = rng.exp1();
                let y = if rng.uniform() * lam < lam_b {
                    self.mech.pi.sample_jump(&self.split, rng.uniform(), rng.uniform())
                } else {
                    match &self.extra {
                        Extra::Conditioned { ht, sampler, .. } => {
                            let y = sampler.sample(rng);
                            let accept = if y.is_infinite() || z == 0.0 { 1.0 } else { ht.h_increment(z, y) / ht.h(y) };
                            if rng.uniform() < accept {
                                y
                            } else {
                                0.0
                            }
                        }
                        Extra::CbConditioned { sampler, .. } => sampler.sample(rng),
                        Extra::Plain => 0.0,
                    }
                };
                z += y;
                if self.comes_down {
                    // Competition brings any jump straight back down; keep the state finite.
                    z = z.min(HUGE);
                }
            }
            if (!z.is_finite() || z >= cfg.explosion_cap) && !self.comes_down {
                tr.observe(t, z.min(cfg.explosion_cap));
                tr.p.progeny = progeny;
                tr.p.steps = steps;
                return Ok(tr.terminate(Status::Exploded, t, pre));
            }
            if t >= kill_time {
                tr.p.progeny = progeny;
                tr.p.steps = steps;
                return Ok(tr.terminate(Status::Killed, t, z));
            }
            tr.observe(t, z);
            if self.absorbing {
                if z < cfg.extinction_floor {
                    below += 1;
                    if below >= FLOOR_STEPS {
                        tr.p.progeny = progeny;
                        tr.p.steps = steps;
                        return Ok(tr.terminate(Status::ExtinctNumerically, t, z));
                    }
                } else {
                    below = 0;
                }
            }
        }
        tr.p.progeny = progeny;
        tr.p.steps = steps;
        Ok(tr.alive(z))
    }

    /// Plain LCB path with the weight `h(Z_T)/h(z0)` attached (zero after absorption).
    pub fn run_weighted(&self, ht: &HTransform, z0: f64, rng: &mut RngStream) -> Result<(Path, f64)> {
        if !(z0 > 0.0) {
            return Err(LcbError::InvalidConfig("weighted paths need a positive start".into()));
        }
        let mut p = self.run(z0, rng)?;
        let w = ht.h(p.end_value) / ht.h(z0);
        p.weight = Some(w);
        Ok((p, w))
    }
}

/// Simulates the plain LCB from `z0`.
pub fn simulate_lcb_euler(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream, z0: f64) -> Result<Path> {
    CbSim::lcb(mech, cfg)?.run(z0, rng)
}

/// Simulates Z↑ from `z0 ≥ 0`.
pub fn simulate_conditioned(ht: Arc<HTransform>, cfg: &SimConfig, rng: &mut RngStream, z0: f64) -> Result<Path> {
    CbSim::conditioned(ht, cfg)?.run(z0, rng)
}

/// Plain LCB path weighted by `h(Z_T)/h(z0)`.
pub fn weighted_unconditioned(ht: &HTransform, cfg: &SimConfig, rng: &mut RngStream, z0: f64) -> Result<(Path, f64)> {
    CbSim::lcb(ht.mech(), cfg)?.run_weighted(ht, z0, rng)
}

/// Simulates the conditioned CB (`c = 0`) from `z0 ≥ 0`.
pub fn simulate_cb_conditioned(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream, z0: f64) -> Result<Path> {
    CbSim::cb_conditioned(mech, cfg)?.run(z0, rng)
}

/// The Lévy process Y started at 0, on the checkpoint grid and steps of at most `dt`.
pub fn simulate_levy(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream) -> Result<Path> {
    cfg.validate()?;
    mech.validate()?;
    let split = mech.pi.split(cfg.eps_jump);
    if !split.rate.is_finite() {
        return Err(LcbError::Simulation("jump rate above ε is not finite".into()));
    }
    let gauss = cfg.gaussian_small_jumps(&split, mech.sigma);
    let var = mech.sigma * mech.sigma + if gauss { split.small_var } else { 0.0 };
    let drift = mech.gamma - split.compensator;
    let mut tr = Tracker::new(cfg, 0.0, false);
    let (mut t, mut y) = (0.0, 0.0);
    let mut e_jump = rng.exp1();
    let mut steps = 0u64;
    while t < cfg.t_max {
        steps += 1;
        let target = tr.target(t);
        let mut h = snap(t, target, cfg.dt);
        let jump = split.rate * h >= e_jump;
        if jump {
            h = e_jump / split.rate;
        } else {
            e_jump -= split.rate * h;
        }
        y += drift * h;
        if var > 0.0 {
            y += (var * h).sqrt() * rng.normal();
        }
        t = if t + h >= target { target } else { t + h };
        if jump {
            e_jump = rng.exp1();
            y += mech.pi.sample_jump(&split, rng.uniform(), rng.uniform());
        }
        tr.observe(t, y);
    }
    tr.p.steps = steps;
    Ok(tr.alive(y))
}

/// GOU process `R = Y - (c/2)∫R du` on its own clock, mapped to Z through `θ_u = ∫ du / R`.
#[derive(Clone)]
pub struct GouSim {
    pub mech: Mechanism,
    pub cfg: SimConfig,
    split: JumpSplit,
    a: f64,
    hc: f64,
    noise: f64,
    grey: bool,
}

impl GouSim {
    pub fn new(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        mech.validate()?;
        let split = mech.pi.split(cfg.eps_jump);
        let gauss = cfg.gaussian_small_jumps(&split, mech.sigma);
        Ok(GouSim {
            mech: mech.clone(),
            cfg: cfg.clone(),
            split,
            a: mech.gamma - split.compensator,
            hc: 0.5 * mech.c,
            noise: mech.sigma * mech.sigma + if gauss { split.small_var } else { 0.0 },
            grey: mech.classify().grey.is_true(),
        })
    }

    /// Path of Z in its own time; `progeny` holds the R-clock `u` reached (σ₀ on absorption).
    pub fn run(&self, z0: f64, rng: &mut RngStream) -> Result<Path> {
        if !(z0 > 0.0 && z0.is_finite()) {
            return Err(LcbError::InvalidConfig("the time change needs a positive start".into()));
        }
        let cfg = &self.cfg;
        let mut tr = Tracker::new(cfg, z0, false);
        let (mut theta, mut u, mut r) = (0.0, 0.0, z0);
        let mut e_jump = rng.exp1();
        let mut steps = 0u64;
        while theta < cfg.t_max {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(LcbError::Simulation("step budget exhausted on the R clock".into()));
            }
            if r < cfg.extinction_floor {
                tr.p.progeny = u;
                tr.p.steps = steps;
                return Ok(tr.terminate(Status::ExtinctNumerically, theta, r));
            }
            let target = tr.target(theta);
            let mut du = cfg.dt * r.min(1.0);
            let scale = self.hc + self.a.abs() / r.max(1.0);
            du = du.min(REL_STEP / scale.max(1e-300));
            // θ advances by ∫ du / R along the drift flow.
            let inc = |s: f64| clock_integral(r, self.a, self.hc, s);
            let inv_r = |s: f64| 1.0 / ou_flow(r, self.a, self.hc, s);
            let mut lands = false;
            let gap = target - theta;
            if inc(du) >= gap {
                du = solve_increasing(&inc, &inv_r, gap, du);
                lands = true;
            }
            let jump = self.split.rate * du >= e_jump;
            if jump {
                du = e_jump / self.split.rate;
                lands = false;
            } else {
                e_jump -= self.split.rate * du;
            }
            let mut r1 = ou_flow(r, self.a, self.hc, du);
            if self.noise > 0.0 {
                r1 += (self.noise * du).sqrt() * rng.normal();
            }
            if r1 <= 0.0 {
                let du0 = du * r / (r - r1);
                theta += clock_integral(r, self.a, self.hc, du0);
                u += du0;
                tr.p.progeny = u;
                tr.p.steps = steps;
                let st = if self.grey { Status::AbsorbedZero } else { Status::ExtinctNumerically };
                return Ok(tr.terminate(st, theta.min(cfg.t_max), 0.0));
            }
            theta = if lands { target } else { theta + inc(du) };
            u += du;
            r = r1;
            let pre = r;
            if jump {
                e_jump = rng.exp1();
                r += self.mech.pi.sample_jump(&self.split, rng.uniform(), rng.uniform());
            }
            if !r.is_finite() || r >= cfg.explosion_cap {
                tr.p.progeny = u;
                tr.p.steps = steps;
                return Ok(tr.terminate(Status::Exploded, theta, pre));
            }
            tr.observe(theta, r);
        }
        tr.p.progeny = u;
        tr.p.steps = steps;
        Ok(tr.alive(r))
    }
}

pub fn simulate_gou_and_timechange(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream, z0: f64) -> Result<Path> {
    GouSim::new(mech, cfg)?.run(z0, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualKind {
    U,
    V,
    VDown,
}

/// The dual diffusions `dX = √(cX) dB + μ(X) dt`.
#[derive(Clone)]
pub struct DualSim {
    pub kind: DualKind,
    pub cfg: SimConfig,
    psi: PsiTable,
    c: f64,
    scale: Option<Arc<ScaleTable>>,
}

impl DualSim {
    fn make(kind: DualKind, mech: &Mechanism, cfg: &SimConfig, scale: Option<Arc<ScaleTable>>) -> Result<Self> {
        cfg.validate()?;
        if !(mech.c > 0.0) {
            return Err(LcbError::NoCompetition);
        }
        Ok(DualSim { kind, cfg: cfg.clone(), psi: PsiTable::new(mech), c: mech.c, scale })
    }

    pub fn u(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        Self::make(DualKind::U, mech, cfg, None)
    }

    pub fn v(mech: &Mechanism, cfg: &SimConfig) -> Result<Self> {
        Self::make(DualKind::V, mech, cfg, None)
    }

    pub fn v_down(scale: Arc<ScaleTable>, cfg: &SimConfig) -> Result<Self> {
        let mech = scale.mech.clone();
        Self::make(DualKind::VDown, &mech, cfg, Some(scale))
    }

    pub fn drift(&self, x: f64) -> f64 {
        match self.kind {
            DualKind::U => -self.psi.psi(x),
            DualKind::V => 0.5 * self.c + self.psi.psi(x),
            DualKind::VDown => {
                let sc = self.scale.as_ref().expect("V↓ carries its scale table");
                let pull = if x > 0.0 { self.c * sc.x_minus_s_prime(x) / sc.s(x) } else { 0.0 };
                0.5 * self.c + self.psi.psi(x) - pull
            }
        }
    }

    /// Half the squared-Bessel dimension of the part handled exactly near 0.
    fn besq_dim(&self) -> Option<f64> {
        match self.kind {
            DualKind::U => Some(0.0),
            DualKind::V => Some(1.0),
            DualKind::VDown => None,
        }
    }

    pub fn run(&self, x0: f64, rng: &mut RngStream) -> Result<Path> {
        if !(x0 > 0.0 && x0.is_finite()) {
            return Err(LcbError::InvalidConfig("dual diffusions start from a positive point".into()));
        }
        let cfg = &self.cfg;
        let milstein = cfg.milstein();
        let mut tr = Tracker::new(cfg, x0, false);
        let (mut t, mut x) = (0.0, x0);
        let mut steps = 0u64;
        while t < cfg.t_max {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(LcbError::Simulation("step budget exhausted".into()));
            }
            let target = tr.target(t);
            let mu = self.drift(x);
            let mut h = snap(t, target, cfg.dt);
            if mu != 0.0 {
                h = h.min(0.1 * x.max(1.0) / mu.abs());
            }
            let lam = 2.0 * x / (self.c * h);
            let mut x1 = match self.besq_dim() {
                // Near 0: exact squared-Bessel transition, remaining drift by Euler.
                Some(d) if lam < BESQ_SWITCH => {
                    let k = d + rng.poisson(lam);
                    0.5 * self.c * h * rng.gamma(k) + (mu - 0.5 * d * self.c) * h
                }
                _ => {
                    let n = rng.normal();
                    let mut x1 = x + mu * h + (self.c * x * h).sqrt() * n;
                    if milstein {
                        x1 += 0.25 * self.c * h * (n * n - 1.0);
                    }
                    x1
                }
            };
            t = if t + h >= target { target } else { t + h };
            if x1 <= 0.0 {
                match self.kind {
                    DualKind::U | DualKind::VDown => {
                        tr.p.steps = steps;
                        return Ok(tr.terminate(Status::AbsorbedZero, t, 0.0));
                    }
                    DualKind::V => x1 = 0.0,
                }
            }
            if !x1.is_finite() || x1 >= cfg.explosion_cap {
                tr.p.steps = steps;
                return Ok(tr.terminate(Status::Exploded, t, x));
            }
            x = x1;
            tr.inf(x);
            tr.observe(t, x);
        }
        tr.p.steps = steps;
        Ok(tr.alive(x))
    }
}

impl DualSim {
    /// End values of two copies from `lo ≤ hi` driven by the same Brownian increments on a common grid.
    ///
    /// Plain full-truncation Euler throughout, so the coupling is exact in the noise; used for comparison tests.
    pub fn run_coupled(&self, lo: f64, hi: f64, rng: &mut RngStream) -> Result<(f64, f64)> {
        let cfg = &self.cfg;
        let (mut a, mut b) = (lo, hi);
        let mut t = 0.0;
        let mut steps = 0u64;
        while t < cfg.t_max {
            steps += 1;
            if steps > MAX_STEPS {
                return Err(LcbError::Simulation("step budget exhausted".into()));
            }
            let (ma, mb) = (self.drift(a), self.drift(b));
            let mut h = snap(t, cfg.t_max, cfg.dt);
            for (x, m) in [(a, ma), (b, mb)] {
                if m != 0.0 {
                    h = h.min(0.1 * x.max(1.0) / m.abs());
                }
            }
            let n = rng.normal();
            let step = |x: f64, m: f64| if x > 0.0 { (x + m * h + (self.c * x * h).sqrt() * n).max(0.0) } else { 0.0 };
            a = step(a, ma);
            b = step(b, mb);
            t = if t + h >= cfg.t_max { cfg.t_max } else { t + h };
        }
        Ok((a, b))
    }
}

pub fn simulate_u(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream, x0: f64) -> Result<Path> {
    DualSim::u(mech, cfg)?.run(x0, rng)
}

pub fn simulate_v(mech: &Mechanism, cfg: &SimConfig, rng: &mut RngStream, y0: f64) -> Result<Path> {
    DualSim::v(mech, cfg)?.run(y0, rng)
}

pub fn simulate_v_down(scale: Arc<ScaleTable>, cfg: &SimConfig, rng: &mut RngStream, y0: f64) -> Result<Path> {
    DualSim::v_down(scale, cfg)?.run(y0, rng)
}

/// Maps `f` over path indices `0..n` in parallel, each with its own stream; output is in index order.
pub fn par_map<T, F>(n: usize, seed: u64, tag: &str, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut RngStream) -> T + Sync + Send,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, tag, i as u64);
            f(i, &mut rng)
        })
        .collect()
}

/// Runs `f` on a dedicated pool of `workers` threads (the global pool when `None`).
pub fn with_workers<T: Send, F: FnOnce() -> T + Send>(workers: Option<usize>, f: F) -> T {
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new().num_threads(w.max(1)).build().expect("thread pool").install(f),
        None => f(),
    }
}

/// Worker count from `LCB_WORKERS`, if set.
pub fn workers_from_env() -> Option<usize> {
    std::env::var("LCB_WORKERS").ok().and_then(|v| v.trim().parse().ok()).filter(|&w: &usize| w > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_time_solver_hits_target() {
        let cum = |s: f64| 5000.0 * flow_integral(1.0, -50.0, 0.0, s);
        let rate = |s: f64| 5000.0 * verhulst(1.0, -50.0, 0.0, s);
        for &e in &[1e-6, 0.1, 1.0, 3.0, 4.8] {
            let s = solve_increasing(&cum, &rate, e, 1e-3);
            assert!((cum(s) - e).abs() < 1e-12 * e.max(1.0), "{e} {s}");
        }
    }

    #[test]
    fn clock_integral_matches_quadrature() {
        for &(r, a, hc, h) in &[(1.0, -8.0, 0.5, 0.05), (0.3, 2.0, 0.5, 0.1), (2.0, 1.0, 0.5, 0.2), (1.0, -1.0, 0.0, 0.3)] {
            let q = integrate(|s| 1.0 / ou_flow(r, a, hc, s), 0.0, h, QuadOpts::rel(1e-13)).unwrap().value;
            assert!((clock_integral(r, a, hc, h) - q).abs() < 1e-12 * q, "{r} {a} {hc} {h}");
        }
    }

    #[test]
    fn flow_integral_is_antiderivative() {
        let (z, a, hc, h) = (0.7, -3.0, 0.5, 0.2);
        let d = 1e-6;
        let num = (flow_integral(z, a, hc, h + d) - flow_integral(z, a, hc, h - d)) / (2.0 * d);
        assert!((num - verhulst(z, a, hc, h)).abs() < 1e-8);
    }

    #[test]
    fn verhulst_matches_logistic_closed_form() {
        let (z, a, hc, t): (f64, f64, f64, f64) = (0.3, 1.5, 0.5, 2.0);
        let k = a / hc;
        let exact = k / (1.0 + (k / z - 1.0) * (-a * t).exp());
        assert!((verhulst(z, a, hc, t) - exact).abs() < 1e-13);
        assert!((verhulst(z, 0.0, 0.0, t) - z).abs() < 1e-15);
    }

    #[test]
    fn ou_flow_is_affine_mean() {
        let r = ou_flow(2.0, 1.0, 0.5, 3.0);
        // stationary point a/hc = 2 is fixed
        assert!((r - 2.0).abs() < 1e-14);
        let r = ou_flow(0.0, 1.0, 0.5, 3.0);
        assert!((r - 2.0 * (1.0 - (-1.5f64).exp())).abs() < 1e-14);
    }
}
