//! Scale function and speed density of the bidual diffusion, the excessive function `h`,
//! the constant ℓ, `f_θ`, the conditioned coefficients and generator evaluations.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{LcbError, Result};
use crate::mechanism::{phi1, JumpMeasure, Mechanism};
use crate::quad::{integrate, integrate_log, integrate_to_inf, QuadOpts};

/// Quintic Hermite basis on a unit cell: values, first and second physical derivatives at both ends.
#[derive(Clone, Copy)]
struct Quintic {
    y0: f64,
    d0: f64,
    e0: f64,
    y1: f64,
    d1: f64,
    e1: f64,
}

impl Quintic {
    fn eval(&self, t: f64, h: f64) -> f64 {
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        let h0 = 1.0 - 10.0 * t3 + 15.0 * t4 - 6.0 * t5;
        let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
        let h3 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h5 = 0.5 * (t3 - 2.0 * t4 + t5);
        self.y0 * h0 + h * self.d0 * h1 + h * h * self.e0 * h2 + self.y1 * h3 + h * self.d1 * h4 + h * h * self.e1 * h5
    }

    fn deriv(&self, t: f64, h: f64) -> f64 {
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let h0 = -30.0 * t2 + 60.0 * t3 - 30.0 * t4;
        let h1 = 1.0 - 18.0 * t2 + 32.0 * t3 - 15.0 * t4;
        let h2 = 0.5 * (2.0 * t - 9.0 * t2 + 12.0 * t3 - 5.0 * t4);
        let h3 = 30.0 * t2 - 60.0 * t3 + 30.0 * t4;
        let h4 = -12.0 * t2 + 28.0 * t3 - 15.0 * t4;
        let h5 = 0.5 * (3.0 * t2 - 8.0 * t3 + 5.0 * t4);
        (self.y0 * h0 + self.y1 * h3) / h + self.d0 * h1 + self.d1 * h4 + h * (self.e0 * h2 + self.e1 * h5)
    }

    fn second(&self, t: f64, h: f64) -> f64 {
        let t2 = t * t;
        let t3 = t2 * t;
        let h0 = -60.0 * t + 180.0 * t2 - 120.0 * t3;
        let h1 = -36.0 * t + 96.0 * t2 - 60.0 * t3;
        let h2 = 0.5 * (2.0 - 18.0 * t + 36.0 * t2 - 20.0 * t3);
        let h3 = 60.0 * t - 180.0 * t2 + 120.0 * t3;
        let h4 = -24.0 * t + 84.0 * t2 - 60.0 * t3;
        let h5 = 0.5 * (6.0 * t - 24.0 * t2 + 20.0 * t3);
        (self.y0 * h0 + self.y1 * h3) / (h * h) + (self.d0 * h1 + self.d1 * h4) / h + self.e0 * h2 + self.e1 * h5
    }
}

/// A function tabulated on a uniform grid in `s = ln x` with values and two `s`-derivatives.
#[derive(Clone, Debug, PartialEq)]
struct LogGrid {
    s0: f64,
    ds: f64,
    v: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl LogGrid {
    fn len(&self) -> usize {
        self.v.len()
    }
    fn s_max(&self) -> f64 {
        self.s0 + self.ds * (self.len() - 1) as f64
    }
    fn cell(&self, s: f64) -> (usize, f64) {
        let t = (s - self.s0) / self.ds;
        let n = self.len();
        let i = (t.floor().max(0.0) as usize).min(n - 2);
        (i, t - i as f64)
    }
    fn quintic(&self, i: usize) -> Quintic {
        Quintic { y0: self.v[i], d0: self.d1[i], e0: self.d2[i], y1: self.v[i + 1], d1: self.d1[i + 1], e1: self.d2[i + 1] }
    }
    /// Value at `s` inside the grid.
    fn at(&self, s: f64) -> f64 {
        let (i, t) = self.cell(s);
        self.quintic(i).eval(t, self.ds)
    }
    /// `s`-derivative at `s` inside the grid.
    fn deriv_at(&self, s: f64) -> f64 {
        let (i, t) = self.cell(s);
        self.quintic(i).deriv(t, self.ds)
    }
    fn second_at(&self, s: f64) -> f64 {
        let (i, t) = self.cell(s);
        self.quintic(i).second(t, self.ds)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleOptions {
    /// Absolute truncation tolerance for `S(x_max)`.
    pub tol: f64,
    /// Fixed `x_max`; chosen from the tail certificate when `None`.
    pub x_max: Option<f64>,
    /// Grid step in `ln x`.
    pub ds: f64,
    /// Smallest grid point relative to `x0`.
    pub x_min_rel: f64,
    /// Build even when hypothesis H is not established.
    pub allow_unverified: bool,
}

impl Default for ScaleOptions {
    fn default() -> Self {
        ScaleOptions { tol: 1e-15, x_max: None, ds: 0.02, x_min_rel: 1e-10, allow_unverified: false }
    }
}

/// `S`, `m = e^{I}` and `I(x) = ∫_{x0}^x 2Ψ(u)/(cu) du` tabulated on a geometric grid.
#[derive(Clone, Debug)]
pub struct ScaleTable {
    pub mech: Mechanism,
    i_grid: LogGrid,
    // R = S e^{I}, smooth where S itself varies too fast to interpolate.
    r_grid: LogGrid,
    // Coarse continuation of I and R from `x_floor` up to `x_min`.
    i_deep: LogGrid,
    r_deep: LogGrid,
    /// Certified rate `b̂ = Ψ(x*)/x*` with `x(-S)'(x) ≤ Ĉ e^{-2b̂x/c}` beyond `x*`.
    pub tail_rate: f64,
    pub tail_start: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Bottom of the coarse continuation.
    pub x_floor: f64,
    pub log_moment: bool,
}

/// Lower end of the coarse continuation below the fine grid.
pub const X_FLOOR: f64 = 1e-300;
const DEEP_DS: f64 = 0.5;

/// Quintic data for `R = S e^{I}` from node values of S: `R' = R I' - 1`, `R'' = R' I' + R I''`.
fn r_grid(i: &LogGrid, s_vals: &[f64]) -> LogGrid {
    let v: Vec<f64> = s_vals.iter().zip(&i.v).map(|(s, iv)| s * iv.exp()).collect();
    let d1: Vec<f64> = v.iter().zip(&i.d1).map(|(r, di)| r * di - 1.0).collect();
    let d2 = (0..v.len()).map(|j| d1[j] * i.d1[j] + v[j] * i.d2[j]).collect();
    LogGrid { s0: i.s0, ds: i.ds, v, d1, d2 }
}

/// Coarse I and R grids on `[X_FLOOR, x_min]` matching the fine grid at `x_min`.
fn deep_grids(mech: &Mechanism, s_top: f64, i_top: f64, s_val_top: f64) -> Result<(LogGrid, LogGrid)> {
    let c = mech.c;
    let n = ((s_top - X_FLOOR.ln()) / DEEP_DS).ceil() as usize + 1;
    let s0 = s_top - (n - 1) as f64 * DEEP_DS;
    let quad = QuadOpts { rel_tol: 1e-13, abs_tol: 1e-16, max_intervals: 200 };
    let mut iv = vec![0.0; n];
    iv[n - 1] = i_top;
    for j in (0..n - 1).rev() {
        let a = s0 + j as f64 * DEEP_DS;
        iv[j] = iv[j + 1] - integrate(|s: f64| 2.0 * mech.psi(s.exp()) / c, a, a + DEEP_DS, quad)?.value;
    }
    let xs: Vec<f64> = (0..n).map(|j| (s0 + j as f64 * DEEP_DS).exp()).collect();
    let i_deep = LogGrid {
        s0,
        ds: DEEP_DS,
        v: iv.clone(),
        d1: xs.iter().map(|&x| 2.0 * mech.psi(x) / c).collect(),
        d2: xs.iter().map(|&x| 2.0 * x * mech.psi_prime(x) / c).collect(),
    };
    let mut sv = vec![0.0; n];
    sv[n - 1] = s_val_top;
    for j in (0..n - 1).rev() {
        let a = s0 + j as f64 * DEEP_DS;
        sv[j] = sv[j + 1] + integrate(|s: f64| (-i_deep.at(s)).exp(), a, a + DEEP_DS, quad)?.value;
    }
    let r_deep = r_grid(&i_deep, &sv);
    Ok((i_deep, r_deep))
}

/// Header tag of table dumps.
pub const TABLE_VERSION: &str = "lcb-scale-table v1";

impl ScaleTable {
    pub fn build(mech: &Mechanism, opts: ScaleOptions) -> Result<Self> {
        if mech.c <= 0.0 {
            return Err(LcbError::NoCompetition);
        }
        let report = mech.classify();
        if !opts.allow_unverified {
            match report.h_holds.value {
                Some(true) => {}
                Some(false) => return Err(LcbError::HypothesisNotEstablished("false".into())),
                None => return Err(LcbError::HypothesisNotEstablished("undetermined".into())),
            }
        }
        let c = mech.c;
        let x0 = mech.x0;
        // Tail certificate.
        let mut x_star = None;
        for k in 0..64 {
            let x = x0 * 2f64.powi(k);
            if mech.psi(x) > 0.0 {
                x_star = Some(x);
                break;
            }
        }
        let x_star = x_star.ok_or(LcbError::TailRate(x0 * 2f64.powi(63)))?;
        let b_hat = mech.psi(x_star) / x_star;
        let rate = 2.0 * b_hat / c;

        let ds = opts.ds;
        let s_lo = (opts.x_min_rel * x0).ln();
        let n_below = ((x0.ln() - s_lo) / ds).round() as usize;
        let s0 = x0.ln() - n_below as f64 * ds;
        let quad = QuadOpts { rel_tol: 1e-13, abs_tol: 1e-16, max_intervals: 200 };
        let di = |x: f64| 2.0 * mech.psi(x) / c;
        let d2i = |x: f64| 2.0 * x * mech.psi_prime(x) / c;

        // I on nodes: outward from x0 until the tail certificate passes, inward down to x_min.
        let cell = |a: f64, b: f64| -> Result<f64> { Ok(integrate(|s: f64| di(s.exp()), a, b, quad)?.value) };
        let mut up = vec![0.0];
        let mut k = 0usize;
        loop {
            let sa = x0.ln() + k as f64 * ds;
            let xb = (sa + ds).exp();
            let next = up[k] + cell(sa, sa + ds)?;
            up.push(next);
            k += 1;
            let done = match opts.x_max {
                Some(xm) => xb >= xm,
                None => xb >= x_star && (-next).exp() / (xb * rate) < opts.tol,
            };
            if done {
                break;
            }
            if xb > 1e8 * x0 {
                return Err(LcbError::TailRate(xb));
            }
        }
        let mut down = vec![0.0; n_below + 1];
        for j in (0..n_below).rev() {
            let sb = s0 + (j + 1) as f64 * ds;
            down[j] = down[j + 1] - cell(sb - ds, sb)?;
        }
        let mut iv = down;
        iv.extend_from_slice(&up[1..]);
        let n = iv.len();
        let xs: Vec<f64> = (0..n).map(|j| (s0 + j as f64 * ds).exp()).collect();
        let i_grid = LogGrid {
            s0,
            ds,
            v: iv.clone(),
            d1: xs.iter().map(|&x| di(x)).collect(),
            d2: xs.iter().map(|&x| d2i(x)).collect(),
        };

        // S by downward accumulation of ∫ e^{-I(e^s)} ds.
        let x_max = xs[n - 1];
        let mut sv = vec![0.0; n];
        let s_quad = QuadOpts { rel_tol: 1e-13, abs_tol: 0.0, max_intervals: 200 };
        // Tail ∫_{s_max}^∞ e^{-I} ds cell by cell with I integrated inside each cell.
        let mut tail = 0.0;
        let (mut sa, mut ia) = (i_grid.s_max(), iv[n - 1]);
        while (-(ia - iv[n - 1])).exp() > 1e-20 {
            let piece = integrate(|s: f64| (-(ia + cell(sa, s).unwrap_or(f64::NAN))).exp(), sa, sa + ds, s_quad)?.value;
            tail += piece;
            ia += cell(sa, sa + ds)?;
            sa += ds;
        }
        sv[n - 1] = tail;
        for j in (0..n - 1).rev() {
            let a = s0 + j as f64 * ds;
            let piece = integrate(|s: f64| (-i_grid.at(s)).exp(), a, a + ds, s_quad)?.value;
            sv[j] = sv[j + 1] + piece;
        }
        let r_grid = r_grid(&i_grid, &sv);
        let (i_deep, r_deep) = deep_grids(mech, s0, i_grid.v[0], sv[0])?;
        Ok(ScaleTable {
            mech: mech.clone(),
            x_floor: i_deep.s0.exp(),
            i_grid,
            r_grid,
            i_deep,
            r_deep,
            tail_rate: b_hat,
            tail_start: x_star,
            x_min: xs[0],
            x_max,
            log_moment: report.log_moment.is_true(),
        })
    }

    /// Grid nodes.
    pub fn grid(&self) -> Vec<f64> {
        (0..self.i_grid.len()).map(|j| (self.i_grid.s0 + j as f64 * self.i_grid.ds).exp()).collect()
    }

    /// `(x, S, m, I)` at every node.
    pub fn nodes(&self) -> Vec<(f64, f64, f64, f64)> {
        self.grid()
            .into_iter()
            .enumerate()
            .map(|(j, x)| (x, self.r_grid.v[j] * (-self.i_grid.v[j]).exp(), self.i_grid.v[j].exp(), self.i_grid.v[j]))
            .collect()
    }

    /// I(x); linear in `ln x` below the floor and bounded below by the certified rate above `x_max`.
    pub fn exp_integral(&self, x: f64) -> f64 {
        let s = x.ln();
        let g = &self.i_grid;
        if s <= g.s0 {
            let d = &self.i_deep;
            if s <= d.s0 {
                d.v[0] + d.d1[0] * (s - d.s0)
            } else {
                d.at(s)
            }
        } else if s >= g.s_max() {
            let n = g.len() - 1;
            g.v[n] + 2.0 * self.tail_rate / self.mech.c * (x - self.x_max)
        } else {
            g.at(s)
        }
    }

    /// Speed density `m(x) = e^{I(x)}`.
    pub fn m(&self, x: f64) -> f64 {
        self.exp_integral(x).exp()
    }

    /// `x (-S)'(x) = e^{-I(x)}`.
    pub fn x_minus_s_prime(&self, x: f64) -> f64 {
        (-self.exp_integral(x)).exp()
    }

    /// `(-S)'(x)`.
    pub fn minus_s_prime(&self, x: f64) -> f64 {
        self.x_minus_s_prime(x) / x
    }

    /// `S(x)`; logarithmic continuation below the floor, zero beyond `x_max`.
    pub fn s(&self, x: f64) -> f64 {
        let s = x.ln();
        let g = &self.r_grid;
        if s <= g.s0 {
            let d = &self.r_deep;
            if s <= d.s0 {
                let i0 = self.i_deep.v[0];
                d.v[0] * (-i0).exp() + (-i0).exp() * (d.s0 - s)
            } else {
                d.at(s) * (-self.i_deep.at(s)).exp()
            }
        } else if s >= g.s_max() {
            0.0
        } else {
            g.at(s) * (-self.i_grid.at(s)).exp()
        }
    }

    /// `S'(x)` from the interpolant (physical coordinate).
    pub fn s_prime_interp(&self, x: f64) -> f64 {
        let s = x.ln();
        let g = &self.r_grid;
        if s <= g.s0 || s >= g.s_max() {
            return -self.minus_s_prime(x);
        }
        let i = self.i_grid.at(s);
        (g.deriv_at(s) - g.at(s) * self.i_grid.deriv_at(s)) * (-i).exp() / x
    }

    /// ℓ extrapolated from the near-zero grid; zero when the log-moment is infinite.
    pub fn compute_ell(&self) -> Result<f64> {
        if !self.log_moment {
            return Ok(0.0);
        }
        let g = &self.i_grid;
        // Decade increments of I near zero must shrink.
        let per_decade = (std::f64::consts::LN_10 / g.ds).round() as usize;
        let inc: Vec<f64> = (0..4).map(|k| (g.v[(k + 1) * per_decade] - g.v[k * per_decade]).abs()).collect();
        if !(inc[0] <= inc[1] * 1.0001 && inc[1] <= inc[2] * 1.0001) {
            return Err(LcbError::Extrapolation(format!("decade increments of I not monotone: {inc:?}")));
        }
        let i0 = self.i_deep.v[0] - 2.0 * self.mech.psi(self.x_floor) / self.mech.c;
        Ok((-i0).exp())
    }

    /// `∫_0^∞ S(v) dv`.
    pub fn integral_s(&self) -> Result<f64> {
        let opts = QuadOpts::rel(1e-12);
        let head = self.x_floor * (self.s(self.x_floor) + self.x_minus_s_prime(self.x_floor));
        Ok(head + integrate_log(|x| self.s(x), self.x_floor, self.x_max, opts)?.value)
    }

    /// `∫_0^∞ x(-S)'(x) dx`.
    pub fn integral_x_minus_s_prime(&self) -> Result<f64> {
        let opts = QuadOpts::rel(1e-12);
        let head = self.x_floor * self.x_minus_s_prime(self.x_floor);
        Ok(head + integrate_log(|x| self.x_minus_s_prime(x), self.x_floor, self.x_max, opts)?.value)
    }

    /// `∫_0^{x0} S(x) m(x) dx` by K21 or by plain Gauss–Legendre-10 panels (`high = false`).
    pub fn integral_sm(&self, high: bool) -> Result<f64> {
        let f = |x: f64| self.s(x) * self.m(x);
        if high {
            let opts = QuadOpts::rel(1e-12);
            let head = self.x_min * f(self.x_min);
            return Ok(head + integrate_log(f, self.x_min, self.mech.x0, opts)?.value);
        }
        // Composite 5-point Gauss in ln x, one panel per grid cell.
        const X: [f64; 5] = [0.0, -0.538469310105683, 0.538469310105683, -0.906179845938664, 0.906179845938664];
        const W: [f64; 5] = [0.568888888888889, 0.478628670499366, 0.478628670499366, 0.236926885056189, 0.236926885056189];
        let g = &self.i_grid;
        let mut total = self.x_min * f(self.x_min);
        let cells = ((self.mech.x0.ln() - g.s0) / g.ds).round() as usize;
        for j in 0..cells {
            let a = g.s0 + j as f64 * g.ds;
            let mid = a + 0.5 * g.ds;
            for k in 0..5 {
                let s = mid + 0.5 * g.ds * X[k];
                let x = s.exp();
                total += 0.5 * g.ds * W[k] * f(x) * x;
            }
        }
        Ok(total)
    }

    /// Residual of `𝒢S = (c/2) x S'' + (c/2 + Ψ) S'` at a node, relative to `|S'| / x`, by second differences.
    pub fn generator_residual(&self, j: usize) -> f64 {
        let g = &self.r_grid;
        let x = (g.s0 + j as f64 * g.ds).exp();
        let hx = 1e-4 * x;
        let (sm, s0, sp) = (self.s(x - hx), self.s(x), self.s(x + hx));
        let s1 = (sp - sm) / (2.0 * hx);
        let s2 = (sp - 2.0 * s0 + sm) / (hx * hx);
        let c = self.mech.c;
        let gs = 0.5 * c * x * s2 + (0.5 * c + self.mech.psi(x)) * s1;
        (gs * x / s1).abs()
    }

    pub fn len(&self) -> usize {
        self.i_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i_grid.len() == 0
    }

    /// `f_θ(z) = ∫ x^{2θ/c} e^{-xz} (-S)'(x) dx`.
    pub fn f_theta(&self, theta: f64, z: f64) -> Result<f64> {
        if !(theta > 0.0) {
            return Err(LcbError::InvalidConfig("θ must be positive".into()));
        }
        let p = 2.0 * theta / self.mech.c;
        let opts = QuadOpts::rel(1e-12);
        let head = self.x_minus_s_prime(self.x_floor) * self.x_floor.powf(p) / p;
        let body = integrate_log(
            |x| x.powf(p - 1.0) * (-x * z).exp() * self.x_minus_s_prime(x),
            self.x_floor,
            self.x_max,
            opts,
        )?
        .value;
        // Tail beyond x_max: x^{p-1} e^{-I} decays at least like e^{-2b̂x/c}.
        let r = 2.0 * self.tail_rate / self.mech.c;
        let tail_fn = |x: f64| x.powf(p - 1.0) * self.x_minus_s_prime(self.x_max) * (-r * (x - self.x_max)).exp();
        let tail = integrate_to_inf(tail_fn, self.x_max, QuadOpts::rel(1e-6))?.value;
        let total = head + body;
        if tail > 1e-10 * total {
            return Err(LcbError::Table(format!("f_θ truncation bound {tail:.3e} too large; enlarge x_max")));
        }
        Ok(total)
    }

    /// Text dump: versioned header with mechanism hash, then `x,S,m,I` rows.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# {TABLE_VERSION}");
        let _ = writeln!(out, "# mechanism={}", self.mech.hash());
        let _ = writeln!(out, "# ds={:e} tail_rate={:e} tail_start={:e}", self.i_grid.ds, self.tail_rate, self.tail_start);
        let _ = writeln!(out, "x,S,m,I");
        for (x, s, m, i) in self.nodes() {
            let _ = writeln!(out, "{x:e},{s:e},{m:e},{i:e}");
        }
        out
    }

    /// Rebuilds a table from [`ScaleTable::dump`] output; the mechanism hash must match.
    pub fn load(mech: &Mechanism, text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let v = lines.next().unwrap_or_default();
        if v.trim_start_matches("# ") != TABLE_VERSION {
            return Err(LcbError::Table(format!("unsupported header {v:?}")));
        }
        let h = lines.next().unwrap_or_default();
        let want = format!("# mechanism={}", mech.hash());
        if h != want {
            return Err(LcbError::Table("mechanism hash mismatch".into()));
        }
        let meta = lines.next().unwrap_or_default();
        let mut ds = f64::NAN;
        let mut tail_rate = f64::NAN;
        let mut tail_start = f64::NAN;
        for kv in meta.trim_start_matches("# ").split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| LcbError::Table("bad metadata".into()))?;
            let v: f64 = v.parse().map_err(|_| LcbError::Table("bad metadata value".into()))?;
            match k {
                "ds" => ds = v,
                "tail_rate" => tail_rate = v,
                "tail_start" => tail_start = v,
                _ => return Err(LcbError::Table(format!("unknown metadata key {k}"))),
            }
        }
        if lines.next() != Some("x,S,m,I") {
            return Err(LcbError::Table("missing column header".into()));
        }
        let mut xs = Vec::new();
        let mut sv = Vec::new();
        let mut iv = Vec::new();
        for l in lines {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 4 {
                return Err(LcbError::Table(format!("bad row {l:?}")));
            }
            let p = |s: &str| s.parse::<f64>().map_err(|_| LcbError::Table(format!("bad number {s:?}")));
            xs.push(p(cols[0])?);
            sv.push(p(cols[1])?);
            let m = p(cols[2])?;
            let i = p(cols[3])?;
            if (m.ln() - i).abs() > 1e-9 * (1.0 + i.abs()) {
                return Err(LcbError::Table("m and I columns disagree".into()));
            }
            iv.push(i);
        }
        if xs.len() < 2 {
            return Err(LcbError::Table("too few rows".into()));
        }
        let c = mech.c;
        let s0 = xs[0].ln();
        let i_grid = LogGrid {
            s0,
            ds,
            v: iv.clone(),
            d1: xs.iter().map(|&x| 2.0 * mech.psi(x) / c).collect(),
            d2: xs.iter().map(|&x| 2.0 * x * mech.psi_prime(x) / c).collect(),
        };
        let r_grid = r_grid(&i_grid, &sv);
        let (i_deep, r_deep) = deep_grids(mech, s0, i_grid.v[0], sv[0])?;
        Ok(ScaleTable {
            mech: mech.clone(),
            x_floor: i_deep.s0.exp(),
            i_grid,
            r_grid,
            i_deep,
            r_deep,
            tail_rate,
            tail_start,
            x_min: xs[0],
            x_max: *xs.last().unwrap(),
            log_moment: mech.pi.log_moment_finite(),
        })
    }

    /// Maximum relative difference of S and I between two tables on the same grid.
    pub fn max_rel_diff(&self, other: &ScaleTable) -> f64 {
        if self.len() != other.len() {
            return f64::INFINITY;
        }
        let mut d: f64 = 0.0;
        for j in 0..self.len() {
            let a = self.r_grid.v[j];
            let b = other.r_grid.v[j];
            d = d.max((a - b).abs() / a.abs().max(1e-300));
            let a = self.i_grid.v[j];
            let b = other.i_grid.v[j];
            d = d.max((a - b).abs() / a.abs().max(1.0));
        }
        d
    }
}

/// `Ein(a) = ∫_0^a (1 - e^{-u})/u du`.
fn ein(a: f64) -> f64 {
    if a < 0.5 {
        let mut term = a;
        let mut sum = a;
        for k in 2..40 {
            term *= -a / k as f64;
            let add = term / k as f64;
            sum += add;
            if add.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    } else {
        integrate(|u: f64| phi1(u) / u, 0.0, a, QuadOpts::rel(1e-14)).map(|r| r.value).unwrap_or(f64::NAN)
    }
}

/// The excessive function `h` with coefficient evaluators of the conditioned dynamics.
#[derive(Clone, Debug)]
pub struct HTransform {
    pub scale: Arc<ScaleTable>,
    pub ell: f64,
    pub h_prime_zero: f64,
    /// `h''(0) = -∫ x e^{-I(x)} dx`.
    pub h_second_zero: f64,
    h_grid: LogGrid,
    h_deep: LogGrid,
    pub z_lo: f64,
    /// Beyond this point `h(z) ≈ A ln z + B` with `A = z h'(z)` at the switch.
    pub z_switch: f64,
    asym_slope: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub b: f64,
    pub q: f64,
    pub k: f64,
}

impl HTransform {
    pub fn new(scale: ScaleTable) -> Result<Self> {
        Self::with_ell(scale, None)
    }

    /// Builds with an injected ℓ (fault injection); `None` uses the extrapolated value.
    pub fn with_ell(scale: ScaleTable, ell_override: Option<f64>) -> Result<Self> {
        let ell = match ell_override {
            Some(v) => v,
            None => scale.compute_ell()?,
        };
        let scale = Arc::new(scale);
        let h_prime_zero = scale.integral_x_minus_s_prime()?;
        let h_second_zero = {
            let opts = QuadOpts::rel(1e-12);
            -integrate_log(|x| x * scale.x_minus_s_prime(x), scale.x_floor, scale.x_max, opts)?.value
        };
        let z_lo: f64 = 1e-8 / scale.mech.x0;
        let z_mid = 1e-2 / scale.x_min;
        let h_grid = h_nodes(&scale, z_lo.ln(), z_mid.ln(), 0.02)?;
        let h_deep = h_nodes(&scale, z_mid.ln(), (1e-2 / scale.x_floor).ln(), DEEP_DS)?;
        let asym_slope = h_deep.d1[h_deep.len() - 1];
        Ok(HTransform {
            scale,
            ell,
            h_prime_zero,
            h_second_zero,
            z_lo: h_grid.s0.exp(),
            z_switch: h_deep.s_max().exp(),
            h_grid,
            h_deep,
            asym_slope,
        })
    }

    fn grid_for(&self, s: f64) -> &LogGrid {
        if s < self.h_grid.s_max() {
            &self.h_grid
        } else {
            &self.h_deep
        }
    }

    pub fn mech(&self) -> &Mechanism {
        &self.scale.mech
    }

    pub fn h(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 0.0;
        }
        if z.is_infinite() {
            return f64::INFINITY;
        }
        if z < self.z_lo {
            return self.h_prime_zero * z + 0.5 * self.h_second_zero * z * z;
        }
        let s = z.ln();
        let g = self.grid_for(s);
        if s >= g.s_max() {
            return g.v[g.len() - 1] + self.asym_slope * (s - g.s_max());
        }
        g.at(s)
    }

    pub fn h_prime(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return self.h_prime_zero;
        }
        if z < self.z_lo {
            return self.h_prime_zero + self.h_second_zero * z;
        }
        let s = z.ln();
        let g = self.grid_for(s);
        if s >= g.s_max() {
            return self.asym_slope / z;
        }
        g.deriv_at(s) / z
    }

    pub fn h_second(&self, z: f64) -> f64 {
        if z < self.z_lo {
            return self.h_second_zero;
        }
        let s = z.ln();
        let g = self.grid_for(s);
        if s >= g.s_max() {
            return -self.asym_slope / z / z;
        }
        (g.second_at(s) - g.deriv_at(s)) / z / z
    }

    /// `h(z)/z`, continuous at zero.
    pub fn h_over_z(&self, z: f64) -> f64 {
        if z < self.z_lo {
            return self.h_prime_zero + 0.5 * self.h_second_zero * z.max(0.0);
        }
        self.h(z) / z
    }

    /// Increment `h(z+y) - h(z)` without cancellation for small `y`.
    pub fn h_increment(&self, z: f64, y: f64) -> f64 {
        increment(|v| self.h(v), |v| self.h_prime(v), z, y)
    }

    pub fn b(&self, z: f64) -> f64 {
        if z <= 0.0 {
            return 1.0;
        }
        self.h_prime(z) / self.h_over_z(z)
    }

    pub fn k(&self, z: f64) -> f64 {
        0.5 * self.mech().c * self.ell / self.h_over_z(z.max(0.0))
    }

    pub fn q(&self, z: f64, y: f64) -> f64 {
        if z <= 0.0 {
            return self.h(y) / self.h_prime_zero;
        }
        self.h_increment(z, y) / self.h_over_z(z)
    }

    pub fn coefficients(&self, z: f64, y: f64) -> Coefficients {
        Coefficients { b: self.b(z), q: self.q(z, y), k: self.k(z) }
    }

    /// `h` through the S-representation by direct quadrature (no z-table).
    pub fn h_exact(&self, z: f64) -> Result<f64> {
        h_via_s(&self.scale, z)
    }

    /// `h` through `∫(1 - e^{-xz})(-S)'(x) dx`.
    pub fn h_first_rep(&self, z: f64) -> Result<f64> {
        let sc = &self.scale;
        let head = sc.x_minus_s_prime(sc.x_floor) * ein(z * sc.x_floor);
        let body = integrate_log(|x| phi1(x * z) * sc.minus_s_prime(x), sc.x_floor, sc.x_max, QuadOpts::rel(1e-13))?.value;
        Ok(head + body)
    }

    pub fn h_prime_exact(&self, z: f64) -> Result<f64> {
        h_prime_quad(&self.scale, z)
    }

    pub fn h_second_exact(&self, z: f64) -> Result<f64> {
        h_second_quad(&self.scale, z)
    }

    /// `∫_{[ε,∞)} h(y) π(dy)` (all atoms for compound Poisson).
    pub fn envelope_mass(&self, eps: f64) -> Result<f64> {
        integrate_against_pi(&self.mech().pi, eps, |y| self.h(y))
    }

    /// Tabulated `h` nodes `(z, h, h')` for dumps.
    pub fn grid_dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# lcb-h-grid v1");
        let _ = writeln!(out, "# mechanism={} ell={:e} h_prime_zero={:e} z_switch={:e}", self.mech().hash(), self.ell, self.h_prime_zero, self.z_switch);
        let _ = writeln!(out, "z,h,h_prime");
        let g = &self.h_grid;
        for j in 0..g.len() {
            let z = (g.s0 + j as f64 * g.ds).exp();
            let _ = writeln!(out, "{:e},{:e},{:e}", z, g.v[j], g.d1[j] / z);
        }
        out
    }
}

/// `h`, `z h'` and `z h' + z² h''` on a grid in `ln z` ending exactly at `s_hi`.
fn h_nodes(sc: &ScaleTable, s_lo: f64, s_hi: f64, ds: f64) -> Result<LogGrid> {
    let n = ((s_hi - s_lo) / ds).ceil() as usize + 1;
    let s0 = s_hi - (n - 1) as f64 * ds;
    let mut g = LogGrid { s0, ds, v: Vec::with_capacity(n), d1: Vec::with_capacity(n), d2: Vec::with_capacity(n) };
    for j in 0..n {
        let z = (s0 + j as f64 * ds).exp();
        let d1 = z_h_prime(sc, z)?;
        g.v.push(h_via_s(sc, z)?);
        g.d1.push(d1);
        g.d2.push(d1 + z2_h_second(sc, z)?);
    }
    Ok(g)
}

fn h_via_s(sc: &ScaleTable, z: f64) -> Result<f64> {
    if z <= 0.0 {
        return Ok(0.0);
    }
    // h(z) = ∫ e^{-u} S(u/z) du; below u = a the log-linear form of S is integrated in closed form.
    let a = (z * sc.x_floor).max(HEAD_CUT);
    let x = a / z;
    let head = sc.s(x) * phi1(a) + sc.x_minus_s_prime(x) * ein(a);
    let u_hi = (z * sc.x_max).min(60.0);
    if u_hi <= a {
        return Ok(head);
    }
    let body = integrate_log(|u| (-u).exp() * sc.s(u / z), a, u_hi, QuadOpts::rel(1e-13))?.value;
    Ok(head + body)
}

/// Below `u = HEAD_CUT` the h quadratures use the log-linear form of S in closed form.
const HEAD_CUT: f64 = 1e-16;

/// `∫ uᵏ e^{-u} L(u/z) du` over `u ≥ max(z x_floor, HEAD_CUT)`, `L = x(-S)'`.
///
/// In `u` the integrand is O(1), so the absolute quadrature tolerance never decides convergence.
fn scaled_moment(sc: &ScaleTable, z: f64, k: i32, u_top: f64) -> Result<(f64, f64)> {
    let a = (z * sc.x_floor).max(HEAD_CUT);
    let u_hi = (z * sc.x_max).min(u_top);
    if u_hi <= a {
        return Ok((a, 0.0));
    }
    let body = integrate_log(|u| u.powi(k) * (-u).exp() * sc.x_minus_s_prime(u / z), a, u_hi, QuadOpts::rel(1e-13))?.value;
    Ok((a, body))
}

fn h_prime_quad(sc: &ScaleTable, z: f64) -> Result<f64> {
    if z <= 0.0 {
        let head = sc.x_minus_s_prime(sc.x_floor) * sc.x_floor;
        return Ok(head + integrate_log(|x| sc.x_minus_s_prime(x), sc.x_floor, sc.x_max, QuadOpts::rel(1e-13))?.value);
    }
    Ok(z_h_prime(sc, z)? / z)
}

/// `z h'(z)`.
fn z_h_prime(sc: &ScaleTable, z: f64) -> Result<f64> {
    let (a, body) = scaled_moment(sc, z, 0, 60.0)?;
    Ok(sc.x_minus_s_prime(a / z) * phi1(a) + body)
}

/// `z² h''(z)`; finite where `z²` itself overflows.
fn z2_h_second(sc: &ScaleTable, z: f64) -> Result<f64> {
    let (a, body) = scaled_moment(sc, z, 1, 80.0)?;
    Ok(-(sc.x_minus_s_prime(a / z) * 0.5 * a * a + body))
}

fn h_second_quad(sc: &ScaleTable, z: f64) -> Result<f64> {
    if z <= 0.0 {
        let head = sc.x_minus_s_prime(sc.x_floor) * 0.5 * sc.x_floor * sc.x_floor;
        let body = integrate_log(|x| x * sc.x_minus_s_prime(x), sc.x_floor, sc.x_max, QuadOpts::rel(1e-13))?.value;
        return Ok(-(head + body));
    }
    Ok(z2_h_second(sc, z)? / z / z)
}

/// Largest `ln y` resolved for log-tail jumps.
pub const LOG_TAIL_S_MAX: f64 = 680.0;

/// `κ ∫_{y ≥ max(lo,1)} g(y) dy / (y (1 + ln y)²)`.
///
/// Each truncation `s` (in `ln y`) is resolved by quadrature and closed by fitting `g(e^s) ≈ a + b s^β`;
/// the fit's error still decays like a power of `s`, so the results at `s_max/4`, `s_max/2`, `s_max`
/// are combined by Aitken's Δ².
pub fn integrate_log_tail<G: Fn(f64) -> f64>(kappa: f64, lo: f64, s_max: f64, g: G) -> Result<f64> {
    let f0 = log_tail_once(kappa, lo, 0.25 * s_max, &g)?;
    let f1 = log_tail_once(kappa, lo, 0.5 * s_max, &g)?;
    let f2 = log_tail_once(kappa, lo, s_max, &g)?;
    let (d1, d2) = (f1 - f0, f2 - f1);
    let ratio = d2 / d1;
    if d1 != 0.0 && ratio > 0.0 && ratio < 0.9 {
        Ok(f2 - d2 * d2 / (d2 - d1))
    } else {
        Ok(f2)
    }
}

fn log_tail_once<G: Fn(f64) -> f64>(kappa: f64, lo: f64, s_max: f64, g: &G) -> Result<f64> {
    // y = exp(1/t - 1) carries mass κ dt.
    let t_hi = 1.0 / (1.0 + lo.max(1.0).ln());
    let t_min = 1.0 / (1.0 + s_max);
    if t_hi <= t_min {
        return Ok(0.0);
    }
    let body = integrate_log(|t| g((1.0 / t - 1.0).exp()), t_min, t_hi, QuadOpts::rel(1e-11))?.value;
    let gs = [0.25, 0.5, 1.0].map(|r| g((r * s_max).exp()));
    let (d1, d2) = (gs[1] - gs[0], gs[2] - gs[1]);
    let tail = if d1 != 0.0 && d2 / d1 > 0.0 {
        let beta = (d2 / d1).log2();
        if beta >= 0.95 {
            return Err(LcbError::Table(format!("log-tail integrand grows like s^{beta:.3}; integral diverges")));
        }
        let b = d2 / ((0.5 * s_max).powf(beta) * (2f64.powf(beta) - 1.0));
        let a = gs[2] - b * s_max.powf(beta);
        let pow = integrate(|t: f64| (1.0 / t - 1.0).powf(beta), 0.0, t_min, QuadOpts::rel(1e-10))?.value;
        a * t_min + b * pow
    } else {
        gs[2] * t_min
    };
    Ok(kappa * (body + tail))
}

/// `∫_{[lo,∞)} g(y) π(dy)` for every kind (atoms summed).
pub fn integrate_against_pi<G: Fn(f64) -> f64>(pi: &JumpMeasure, lo: f64, g: G) -> Result<f64> {
    let opts = QuadOpts::rel(1e-10);
    match pi {
        JumpMeasure::None => Ok(0.0),
        JumpMeasure::CompoundPoisson { atoms } => Ok(atoms.iter().map(|&(s, r)| r * g(s)).sum()),
        JumpMeasure::LogTail { kappa } => integrate_log_tail(*kappa, lo, LOG_TAIL_S_MAX, g),
        _ => {
            let lo = match pi {
                JumpMeasure::TabulatedDensity(t) => lo.max(t.points[0].0),
                _ => lo.max(1e-100),
            };
            let mut pts = vec![lo];
            if let JumpMeasure::TabulatedDensity(t) = pi {
                for &(y, _) in &t.points {
                    if y > lo {
                        pts.push(y);
                    }
                }
            }
            if lo < 1.0 {
                pts.push(1.0);
            }
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            let top = *pts.last().unwrap();
            let mut total = 0.0;
            for w in pts.windows(2) {
                total += integrate_log(|y| g(y) * pi.density(y), w[0], w[1], opts)?.value;
            }
            total += integrate_log(|y| g(y) * pi.density(y), top, top * 1e6, opts)?.value;
            total += integrate_to_inf(|y| g(y) * pi.density(y), top * 1e6, QuadOpts::rel(1e-8))?.value;
            Ok(total)
        }
    }
}

/// A twice-differentiable test function with optional accurate second-order increment.
pub struct TestFn<'a> {
    pub f: Box<dyn Fn(f64) -> f64 + 'a>,
    pub d1: Box<dyn Fn(f64) -> f64 + 'a>,
    pub d2: Box<dyn Fn(f64) -> f64 + 'a>,
}

impl<'a> TestFn<'a> {
    pub fn new(f: impl Fn(f64) -> f64 + 'a, d1: impl Fn(f64) -> f64 + 'a, d2: impl Fn(f64) -> f64 + 'a) -> Self {
        TestFn { f: Box::new(f), d1: Box::new(d1), d2: Box::new(d2) }
    }

    /// `z ↦ e^{-xz}`.
    pub fn exponential(x: f64) -> TestFn<'a> {
        TestFn::new(move |z| (-x * z).exp(), move |z| -x * (-x * z).exp(), move |z| x * x * (-x * z).exp())
    }
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
const GL8: [(f64, f64); 8] = [
    (0.019855071751231912, 0.050614268145188344),
    (0.10166676129318664, 0.11119051722668717),
    (0.2372337950418355, 0.15685332293894352),
    (0.4082826787521751, 0.18134189168918088),
    (0.5917173212478248, 0.18134189168918088),
    (0.7627662049581645, 0.15685332293894352),
    (0.8983332387068134, 0.11119051722668717),
    (0.9801449282487681, 0.050614268145188344),
];

/// `∫ (f(z+y) - f(z) - y f'(z) 1{y<1}) π(dy)` with a Taylor expansion for tiny `y`.
fn jump_integral(pi: &JumpMeasure, f: &TestFn, z: f64) -> Result<f64> {
    let fz = (f.f)(z);
    let f1 = (f.d1)(z);
    let f2 = (f.d2)(z);
    let delta = 1e-7 * (1.0 + z);
    let mid = 1e-2 * (1.0 + z);
    let incr = |y: f64| {
        let comp = if y < 1.0 { y * f1 } else { 0.0 };
        if y < delta {
            0.5 * f2 * y * y
        } else if y < mid.min(1.0) {
            // Integral form of the Taylor remainder avoids cancellation.
            y * y * GL8.iter().map(|&(u, w)| w * (1.0 - u) * (f.d2)(z + u * y)).sum::<f64>()
        } else {
            (f.f)(z + y) - fz - comp
        }
    };
    match pi {
        JumpMeasure::None => Ok(0.0),
        JumpMeasure::CompoundPoisson { atoms } => Ok(atoms.iter().map(|&(s, r)| r * incr(s)).sum()),
        JumpMeasure::LogTail { .. } => integrate_against_pi(pi, 1.0, incr),
        _ => {
            let opts = QuadOpts::rel(1e-9);
            let lo = match pi {
                JumpMeasure::TabulatedDensity(t) => t.points[0].0,
                _ => 0.0,
            };
            // Below δ the integrand is f''y²/2 against the density.
            let head = if lo < delta {
                let a = lo.max(1e-300);
                match pi {
                    JumpMeasure::StableTail { alpha, a: coef } => {
                        0.5 * f2 * crate::mechanism::stable_weight(*alpha, *coef) * delta.powf(2.0 - alpha) / (2.0 - alpha)
                    }
                    JumpMeasure::NeveuImplied => 0.5 * f2 * delta,
                    _ => integrate_log(|y| 0.5 * f2 * y * y * pi.density(y), a, delta, opts)?.value,
                }
            } else {
                0.0
            };
            let start = lo.max(delta);
            let mut pts = vec![start];
            if let JumpMeasure::TabulatedDensity(t) = pi {
                pts.extend(t.points.iter().map(|p| p.0).filter(|&y| y > start));
            }
            if start < 1.0 {
                pts.push(1.0);
            }
            pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            pts.dedup();
            let top = *pts.last().unwrap();
            let mut body = 0.0;
            for w in pts.windows(2) {
                body += integrate_log(|y| incr(y) * pi.density(y), w[0], w[1], opts)?.value;
            }
            body += integrate_log(|y| incr(y) * pi.density(y), top, top * 1e8, opts)?.value;
            body += integrate_to_inf(|y| incr(y) * pi.density(y), top * 1e8, QuadOpts::rel(1e-6))?.value;
            Ok(head + body)
        }
    }
}

/// `ℒf(z) = z L^Ψ f(z) - (c/2) z² f'(z)` with `L^Ψ f = ∫(…)π(dy) + γ f' + σ²/2 f''`.
pub fn generator_apply(mech: &Mechanism, f: &TestFn, z: f64) -> Result<f64> {
    let j = jump_integral(&mech.pi, f, z)?;
    let lpsi = j + mech.gamma * (f.d1)(z) + 0.5 * mech.sigma * mech.sigma * (f.d2)(z);
    Ok(z * lpsi - 0.5 * mech.c * z * z * (f.d1)(z))
}

/// `𝒜g(x) = (c/2) x g''(x) - Ψ(x) g'(x)`, generator of the dual diffusion `U`.
pub fn dual_generator_apply(mech: &Mechanism, g: &TestFn, x: f64) -> f64 {
    0.5 * mech.c * x * (g.d2)(x) - mech.psi(x) * (g.d1)(x)
}

/// `g(z+y) - g(z)`; below `y = 1e-2 (1+z)` through `y ∫_0^1 g'(z+uy) du` to avoid cancellation.
fn increment(g: impl Fn(f64) -> f64, dg: impl Fn(f64) -> f64, z: f64, y: f64) -> f64 {
    if y < 1e-2 * (1.0 + z) {
        y * GL8.iter().map(|&(u, w)| w * dg(z + u * y)).sum::<f64>()
    } else {
        g(z + y) - g(z)
    }
}

/// `ℒ↑f(z) = ℒf(z) + σ² b f' + ∫(f(z+y) - f(z)) q(z,y) π(dy) - k f`; at `z = 0` the boundary form.
pub fn generator_up_apply(ht: &HTransform, f: &TestFn, z: f64) -> Result<f64> {
    let mech = ht.mech();
    let s2 = mech.sigma * mech.sigma;
    let df = |y: f64| increment(&f.f, &f.d1, z.max(0.0), y);
    if z <= 0.0 {
        let f0 = (f.f)(0.0);
        let jump = integrate_against_pi(&mech.pi, 0.0, |y| df(y) * ht.h(y) / ht.h_prime_zero)?;
        return Ok(s2 * (f.d1)(0.0) + jump - 0.5 * mech.c * ht.ell / ht.h_prime_zero * f0);
    }
    let base = generator_apply(mech, f, z)?;
    let coef = 1.0 / ht.h_over_z(z);
    let imm = integrate_against_pi(&mech.pi, 0.0, |y| df(y) * coef * ht.h_increment(z, y))?;
    Ok(base + s2 * ht.b(z) * (f.d1)(z) + imm - ht.k(z) * (f.f)(z))
}

/// A numerical identity residual; passes when `value <= limit` (NaN fails).
#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostic {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Diagnostic {
    pub fn pass(&self) -> bool {
        self.value <= self.limit
    }
}

/// Builds the scale table and h-transform and checks them: dump round-trip, speed × scale,
/// stability under a doubled `x_max`, the two h representations and both generator identities.
pub fn identity_diagnostics(mech: &Mechanism, ell_override: Option<f64>) -> Result<(HTransform, Vec<Diagnostic>)> {
    let opts = ScaleOptions::default();
    let table = ScaleTable::build(mech, opts)?;
    let reload = ScaleTable::load(mech, &table.dump())?;
    let mut out = Vec::new();
    let mut line = |name: String, value: f64, limit: f64| out.push(Diagnostic { name, value, limit });
    line("reload_max_rel_diff".into(), table.max_rel_diff(&reload), 1e-12);
    let worst = table.grid().iter().map(|&x| (x * table.s_prime_interp(x) * table.m(x) + 1.0).abs()).fold(0.0, f64::max);
    line("speed_scale_identity".into(), worst, 1e-8);
    let x2 = ScaleTable::build(mech, ScaleOptions { x_max: Some(2.0 * table.x_max), ..opts })?;
    let ht = HTransform::with_ell(table, ell_override)?;
    let h2 = HTransform::new(x2)?;
    line("double_x_max_h1".into(), (ht.h(1.0) - h2.h(1.0)).abs() / ht.h(1.0), 1e-6);
    for z in [0.1, 1.0, 10.0] {
        let a = ht.h_exact(z)?;
        let b = ht.h_first_rep(z)?;
        line(format!("h_representations_z{z}"), (a - b).abs() / a, 1e-6);
    }
    let hf = TestFn::new(|z| ht.h(z), |z| ht.h_prime(z), |z| ht.h_second(z));
    let inv = TestFn::new(
        |z| 1.0 / ht.h(z),
        |z| -ht.h_prime(z) / (ht.h(z) * ht.h(z)),
        |z| {
            let (h, h1, h2) = (ht.h(z), ht.h_prime(z), ht.h_second(z));
            2.0 * h1 * h1 / (h * h * h) - h2 / (h * h)
        },
    );
    for z in [0.5, 1.0, 5.0] {
        // Residuals relative to the size of the competition term.
        let want = -0.5 * mech.c * ht.ell * z;
        let scale = (0.5 * mech.c * z * z * ht.h_prime(z)).max(want.abs());
        let lh = generator_apply(mech, &hf, z)?;
        line(format!("generator_h_z{z}"), (lh - want).abs() / scale, 1e-4);
        let scale_up = 0.5 * mech.c * z * z * ht.h_prime(z) / (ht.h(z) * ht.h(z));
        line(format!("conditioned_generator_inv_h_z{z}"), generator_up_apply(&ht, &inv, z)?.abs() / scale_up, 1e-4);
    }
    std::mem::drop((hf, inv));
    Ok((ht, out))
}
