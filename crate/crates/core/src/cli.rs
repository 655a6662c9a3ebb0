//! Campaign configuration and the `lcb` commands.
//!
//! A campaign is one TOML file with `[mechanism]`, `[sim]` and `[run]` sections; unknown keys are
//! rejected everywhere. Flags only override the seed, the output directory and the path dump count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytic::identity_diagnostics;
use crate::error::{LcbError, Result};
use crate::mechanism::{JumpMeasure, Mechanism};
use crate::montecarlo::{self as mc, TestFunction, Verdict};
use crate::paths::{par_map, with_workers, workers_from_env, CbSim, DualSim, GouSim, Path, SimConfig, Status};
use crate::{HTransform, ScaleOptions, ScaleTable};

/// Exit code for usage, configuration and runtime errors.
pub const EXIT_ERROR: i32 = 126;
/// Largest exit code used to count failures.
pub const MAX_FAILURES: i32 = 125;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Stable,
    Neveu,
    Feller,
    Custom,
}

/// `[mechanism]`: `family` picks which keys apply.
///
/// stable: `a`, `alpha`, `gamma`, `c`; neveu: `c`; feller: `sigma`, `gamma`, `c`;
/// custom: `sigma`, `gamma`, `c`, `pi` (a table with `kind` and its parameters).
/// Any family accepts `x0`, `h_override` and `ell_override`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSpec {
    pub family: Family,
    pub c: f64,
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub a: Option<f64>,
    pub alpha: Option<f64>,
    pub pi: Option<JumpMeasure>,
    pub x0: Option<f64>,
    pub h_override: Option<bool>,
    /// Replaces the computed ℓ in the h-transform (fault injection).
    pub ell_override: Option<f64>,
}

impl MechanismSpec {
    /// Parses a bare mechanism table, e.g. `family = "neveu"` and `c = 1.0`.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LcbError::InvalidConfig(e.to_string()))
    }

    pub fn build(&self) -> Result<Mechanism> {
        let bad = |k: &str| Err(LcbError::InvalidConfig(format!("key `{k}` does not apply to family {:?}", self.family)));
        let need = |v: Option<f64>, k: &str| v.ok_or_else(|| LcbError::InvalidConfig(format!("family {:?} needs `{k}`", self.family)));
        let m = match self.family {
            Family::Stable => {
                if self.sigma.is_some() {
                    return bad("sigma");
                }
                if self.pi.is_some() {
                    return bad("pi");
                }
                Mechanism::stable(need(self.a, "a")?, need(self.alpha, "alpha")?, self.gamma.unwrap_or(0.0), self.c)?
            }
            Family::Neveu => {
                for (k, v) in [("sigma", self.sigma), ("gamma", self.gamma), ("a", self.a), ("alpha", self.alpha)] {
                    if v.is_some() {
                        return bad(k);
                    }
                }
                if self.pi.is_some() {
                    return bad("pi");
                }
                Mechanism::neveu(self.c)?
            }
            Family::Feller => {
                for (k, v) in [("a", self.a), ("alpha", self.alpha)] {
                    if v.is_some() {
                        return bad(k);
                    }
                }
                if self.pi.is_some() {
                    return bad("pi");
                }
                Mechanism::feller(need(self.sigma, "sigma")?, self.gamma.unwrap_or(0.0), self.c)?
            }
            Family::Custom => {
                for (k, v) in [("a", self.a), ("alpha", self.alpha)] {
                    if v.is_some() {
                        return bad(k);
                    }
                }
                let pi = self.pi.clone().unwrap_or(JumpMeasure::None);
                Mechanism::custom(self.sigma.unwrap_or(0.0), self.gamma.unwrap_or(0.0), pi, self.c)?
            }
        };
        let m = match self.x0 {
            Some(x0) => m.with_x0(x0)?,
            None => m,
        };
        Ok(m.with_override(self.h_override))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Inspect,
    Tables,
    Simulate,
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Simulator {
    #[default]
    Lcb,
    Conditioned,
    Weighted,
    CbConditioned,
    Gou,
    U,
    V,
    VDown,
}

/// Parameters shared by the checks; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckParams {
    pub z: f64,
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub t_list: Vec<f64>,
    /// Infimum levels as fractions of `z`.
    pub a_fractions: Vec<f64>,
    pub theta_list: Vec<f64>,
    /// Horizon for checks that follow paths to extinction, killing or explosion.
    pub long_horizon: f64,
    pub x_big: f64,
    pub t_small: f64,
    pub limit_thetas: Vec<f64>,
    pub boxes: Vec<(f64, f64)>,
}

impl Default for CheckParams {
    fn default() -> Self {
        CheckParams {
            z: 1.0,
            x: 1.0,
            y: 1.0,
            t: 0.5,
            t_list: vec![0.5, 1.0],
            a_fractions: vec![0.1, 0.25, 0.5, 0.75, 0.9],
            theta_list: vec![0.3, 1.0],
            long_horizon: 20.0,
            x_big: 10.0,
            t_small: 0.05,
            limit_thetas: vec![1.0, 0.1, 0.01],
            boxes: vec![(0.5, 2.0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSpec {
    /// When present it must match the command given on the command line.
    pub command: Option<CommandName>,
    pub checks: Vec<String>,
    pub out: String,
    pub seed: Option<u64>,
    pub simulator: Simulator,
    pub z0: f64,
    pub dump_paths: usize,
    /// Re-run every verify check at half the step.
    pub half_dt: bool,
    pub params: CheckParams,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            command: None,
            checks: Vec::new(),
            out: "lcb-out".into(),
            seed: None,
            simulator: Simulator::Lcb,
            z0: 1.0,
            dump_paths: 0,
            half_dt: false,
            params: CheckParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignSpec {
    pub mechanism: MechanismSpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub run: RunSpec,
}

impl CampaignSpec {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LcbError::InvalidConfig(e.to_string()))
    }
}

pub const ALL_CHECKS: [&str; 11] = [
    "laplace-duality",
    "siegmund-duality",
    "biduality",
    "h-supermartingale",
    "infimum-law",
    "progeny-laplace",
    "lifetime-exponential",
    "killing-dichotomy",
    "conditioning-limit",
    "two-constructions",
    "entrance-from-zero",
];

#[derive(Parser, Debug)]
#[command(name = "lcb", version, about = "Logistic CB processes: regime report, scale tables, simulation and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Clone, Debug, clap::Args)]
pub struct Common {
    /// Campaign TOML file.
    pub config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the number of full paths written by `simulate`.
    #[arg(long)]
    pub dump_paths: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Regime report: Ψ probes, ρ, Grey, log-moment, ℰ, H and ℓ.
    Inspect(Common),
    /// Builds the scale table and h grid and cross-checks them.
    Tables(Common),
    /// Runs a simulator and writes marginal statistics.
    Simulate(Common),
    /// Runs the selected checks and writes verdicts.
    Verify(Common),
}

/// A loaded campaign with flags applied.
pub struct Campaign {
    pub spec: CampaignSpec,
    pub mech: Mechanism,
    pub cfg: SimConfig,
    pub out: PathBuf,
    pub config_hash: String,
    pub command: CommandName,
}

impl Campaign {
    pub fn load(command: CommandName, c: &Common) -> Result<Self> {
        let bytes = fs::read(&c.config)?;
        let text = String::from_utf8(bytes.clone()).map_err(|e| LcbError::InvalidConfig(e.to_string()))?;
        let mut spec = CampaignSpec::parse(&text)?;
        if let Some(want) = spec.run.command {
            if want != command {
                return Err(LcbError::InvalidConfig(format!("config is for `{want:?}`, not `{command:?}`")));
            }
        }
        if let Some(s) = c.seed.or(spec.run.seed) {
            spec.sim.seed = s;
        }
        if let Some(d) = c.dump_paths {
            spec.run.dump_paths = d;
        }
        let out = c.out.clone().unwrap_or_else(|| PathBuf::from(&spec.run.out));
        spec.sim.validate()?;
        let mech = spec.mechanism.build()?;
        let config_hash = hex(&Sha256::digest(&bytes));
        let cfg = spec.sim.clone();
        Ok(Campaign { spec, mech, cfg, out, config_hash, command })
    }

    fn h_transform(&self) -> Result<Arc<HTransform>> {
        let scale = ScaleTable::build(&self.mech, ScaleOptions::default())?;
        Ok(Arc::new(HTransform::with_ell(scale, self.spec.mechanism.ell_override)?))
    }

    fn manifest(&self, files: &[String], extra: serde_json::Value) -> String {
        let v = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "mechanism_hash": self.mech.hash(),
            "seed": self.cfg.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "sim": self.cfg,
            "files": files,
            "extra": extra,
        });
        serde_json::to_string_pretty(&v).expect("manifest serializes")
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn write(dir: &FsPath, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body)?;
    Ok(())
}

/// Parses `args` (including the program name) and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match with_workers(workers_from_env(), || dispatch(&cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: &Cmd) -> Result<i32> {
    match cmd {
        Cmd::Inspect(c) => {
            let camp = Campaign::load(CommandName::Inspect, c)?;
            print!("{}", render_inspect(&camp.mech));
            Ok(0)
        }
        Cmd::Tables(c) => cmd_tables(&Campaign::load(CommandName::Tables, c)?),
        Cmd::Simulate(c) => cmd_simulate(&Campaign::load(CommandName::Simulate, c)?),
        Cmd::Verify(c) => cmd_verify(&Campaign::load(CommandName::Verify, c)?),
    }
}

/// Regime report with the boundary row for Z and Z↑.
pub fn render_inspect(m: &Mechanism) -> String {
    let r = m.classify();
    let mut s = String::new();
    let _ = writeln!(s, "mechanism {}", m.hash());
    let _ = writeln!(s, "sigma {} gamma {} c {} x0 {} pi {:?}", m.sigma, m.gamma, m.c, m.x0, m.pi);
    for x in [0.01, 0.1, 1.0, 10.0, 100.0] {
        let _ = writeln!(s, "psi({x}) = {:.10e}", m.psi(x));
    }
    let _ = writeln!(s, "rho = {:.10e}", r.rho + 0.0);
    let _ = writeln!(s, "grey = {}", r.grey.label());
    let _ = writeln!(s, "log_moment = {}", r.log_moment.label());
    let _ = writeln!(s, "calE_infinite = {}", r.cal_e_infinite.label());
    let _ = writeln!(s, "psi_inf_infinite = {}", r.psi_inf_infinite.label());
    let _ = writeln!(s, "H = {}", r.h_holds.label());
    let _ = writeln!(s, "ell = {:.10e}", r.ell);
    if m.c == 0.0 {
        let _ = writeln!(s, "note: competition-free (c = 0); the LCB reduces to a CB process");
    }
    let zero = match r.grey.value {
        Some(true) => "absorbing (hit in finite time)",
        Some(false) => "extinguishing (not hit)",
        None => "undetermined",
    };
    let inf = if m.c == 0.0 {
        "n/a"
    } else {
        match r.cal_e_infinite.value {
            Some(true) => "entrance",
            Some(false) => "accessible",
            None => "undetermined",
        }
    };
    let up = if m.c == 0.0 || !r.h_holds.is_true() {
        "n/a"
    } else if r.log_moment.is_true() {
        "killed"
    } else {
        "continuous explosion"
    };
    let _ = writeln!(s, "regime: 0 {zero} | ∞ {inf} | conditioned lifetime ends by {up}");
    for n in &r.notes {
        let _ = writeln!(s, "note: {n}");
    }
    s
}

fn cmd_tables(camp: &Campaign) -> Result<i32> {
    let (ht, rows) = identity_diagnostics(&camp.mech, camp.spec.mechanism.ell_override)?;
    let dump = ht.scale.dump();
    let mut diag = String::from("check,value,limit,pass\n");
    for r in &rows {
        let _ = writeln!(diag, "{},{:.17e},{:.17e},{}", r.name, r.value, r.limit, r.pass());
    }
    let failures = rows.iter().filter(|r| !r.pass()).count() as i32;
    write(&camp.out, "scale_table.txt", &dump)?;
    write(&camp.out, "h_grid.csv", &ht.grid_dump())?;
    write(&camp.out, "table_diagnostics.csv", &diag)?;
    let files = ["scale_table.txt", "h_grid.csv", "table_diagnostics.csv"].map(String::from);
    write(&camp.out, "manifest.json", &camp.manifest(&files, serde_json::json!({ "ell": ht.ell, "failures": failures })))?;
    print!("{diag}");
    Ok(failures.min(MAX_FAILURES))
}

fn simulate_all(camp: &Campaign, cfg: &SimConfig) -> Result<Vec<Path>> {
    let z0 = camp.spec.run.z0;
    let n = cfg.n_paths;
    let tag = format!("simulate/{:?}", camp.spec.run.simulator);
    let out: Vec<Result<Path>> = match camp.spec.run.simulator {
        Simulator::Lcb => {
            let s = CbSim::lcb(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::Conditioned => {
            let s = CbSim::conditioned(camp.h_transform()?, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::Weighted => {
            let ht = camp.h_transform()?;
            let s = CbSim::lcb(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run_weighted(&ht, z0, r).map(|x| x.0))
        }
        Simulator::CbConditioned => {
            let s = CbSim::cb_conditioned(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::Gou => {
            let s = GouSim::new(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::U => {
            let s = DualSim::u(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::V => {
            let s = DualSim::v(&camp.mech, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
        Simulator::VDown => {
            let scale = Arc::new(ScaleTable::build(&camp.mech, ScaleOptions::default())?);
            let s = DualSim::v_down(scale, cfg)?;
            par_map(n, cfg.seed, &tag, |_, r| s.run(z0, r))
        }
    };
    out.into_iter().collect()
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let i = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[i]
}

/// Long-format marginal statistics: `t,statistic,value`.
pub fn marginal_statistics(paths: &[Path], times: &[f64]) -> String {
    let mut out = String::from("t,statistic,value\n");
    for (i, &t) in times.iter().enumerate() {
        let mut alive: Vec<f64> = Vec::new();
        let mut counts = [0usize; 5];
        for p in paths {
            let st = if p.status.is_terminal() && p.lifetime <= t { p.status } else { Status::AliveAtHorizon };
            let k = Status::ALL.iter().position(|s| *s == st).expect("known status");
            counts[k] += 1;
            if st == Status::AliveAtHorizon {
                alive.push(p.checkpoints[i]);
            }
        }
        alive.sort_by(f64::total_cmp);
        let mean = mc::neumaier_sum(alive.iter().copied()) / alive.len().max(1) as f64;
        let mut row = |k: &str, v: f64| {
            let _ = writeln!(out, "{t:.17e},{k},{v:.17e}");
        };
        row("mean", if alive.is_empty() { f64::NAN } else { mean });
        for (name, p) in [("q05", 0.05), ("q25", 0.25), ("q50", 0.5), ("q75", 0.75), ("q95", 0.95)] {
            row(name, quantile(&alive, p));
        }
        for (k, s) in Status::ALL.iter().enumerate() {
            row(&format!("count_{}", s.label()), counts[k] as f64);
        }
    }
    out
}

fn cmd_simulate(camp: &Campaign) -> Result<i32> {
    let mut cfg = camp.cfg.clone();
    let mut times: Vec<f64> = cfg.checkpoints.iter().copied().filter(|&t| t <= cfg.t_max).collect();
    if times.last().copied() != Some(cfg.t_max) {
        times.push(cfg.t_max);
    }
    cfg.checkpoints = times.clone();
    cfg.record = false;
    let paths = simulate_all(camp, &cfg)?;
    let mut files = vec!["statistics.csv".to_string()];
    write(&camp.out, "statistics.csv", &marginal_statistics(&paths, &times))?;
    let k = camp.spec.run.dump_paths.min(cfg.n_paths);
    if k > 0 {
        // Recording consumes no randomness, so the first k paths are the same paths.
        let rec = SimConfig { n_paths: k, record: true, ..cfg.clone() };
        let dumped = simulate_all(camp, &rec)?;
        for (i, p) in dumped.iter().enumerate() {
            let name = format!("path_{i:06}.csv");
            write(&camp.out.join("paths"), &name, &p.to_csv())?;
            files.push(format!("paths/{name}"));
        }
    }
    write(&camp.out, "manifest.json", &camp.manifest(&files, serde_json::json!({ "simulator": camp.spec.run.simulator, "z0": camp.spec.run.z0 })))?;
    println!("wrote {} paths' statistics to {}", paths.len(), camp.out.display());
    Ok(0)
}

/// Runs one named check under the campaign's parameters.
pub fn run_check(name: &str, mech: &Mechanism, ht: Option<Arc<HTransform>>, cfg: &SimConfig, p: &CheckParams) -> Result<Vec<Verdict>> {
    let need = || ht.clone().ok_or_else(|| LcbError::InvalidConfig(format!("`{name}` needs c > 0")));
    let long = SimConfig { t_max: p.long_horizon, ..cfg.clone() };
    match name {
        "laplace-duality" => Ok(vec![mc::check_laplace_duality(mech, cfg, p.z, p.x, p.t)?]),
        "siegmund-duality" => Ok(vec![mc::check_siegmund_duality(mech, cfg, p.x, p.y, p.t)?]),
        "biduality" => Ok(vec![mc::check_biduality(mech, cfg, p.z, p.x, p.t)?]),
        "h-supermartingale" => mc::check_h_supermartingale(&*need()?, cfg, p.z, &p.t_list),
        "infimum-law" => {
            let a: Vec<f64> = p.a_fractions.iter().map(|f| f * p.z).collect();
            mc::check_infimum_law(need()?, &long, p.z, &a)
        }
        "progeny-laplace" => {
            let scale = ht.as_ref().map(|h| h.scale.clone());
            mc::check_progeny_lt(mech, scale.as_deref(), &long, p.z, &p.theta_list)
        }
        "lifetime-exponential" => mc::check_lifetime_exponential(mech, &long, p.z),
        "killing-dichotomy" => mc::check_killing_dichotomy(need()?, &long, p.z),
        "conditioning-limit" => mc::check_conditioning_limit(need()?, &long, p.z, p.t, &p.limit_thetas, &p.boxes),
        "two-constructions" => {
            let mut fs = vec![TestFunction::Laplace(p.x)];
            fs.extend(p.boxes.iter().map(|&(lo, hi)| TestFunction::Indicator(lo, hi)));
            mc::check_two_constructions(need()?, cfg, p.z, p.t, &fs)
        }
        "entrance-from-zero" => mc::check_entrance_from_zero(need()?, cfg, p.x, p.t, p.x_big, p.t_small),
        other => Err(LcbError::InvalidConfig(format!("unknown check `{other}`"))),
    }
}

/// Expands `all` to every check that applies to the mechanism.
pub fn expand_checks(names: &[String], mech: &Mechanism) -> Result<Vec<String>> {
    if names.is_empty() {
        return Err(LcbError::InvalidConfig("empty check list; set run.checks".into()));
    }
    let mut out = Vec::new();
    for n in names {
        if n == "all" {
            if mech.c > 0.0 {
                out.extend(ALL_CHECKS.iter().filter(|c| **c != "lifetime-exponential").map(|c| c.to_string()));
            } else {
                out.extend(["progeny-laplace", "lifetime-exponential"].map(String::from));
            }
        } else if ALL_CHECKS.contains(&n.as_str()) {
            out.push(n.clone());
        } else {
            return Err(LcbError::InvalidConfig(format!("unknown check `{n}`")));
        }
    }
    Ok(out)
}

fn cmd_verify(camp: &Campaign) -> Result<i32> {
    let checks = expand_checks(&camp.spec.run.checks, &camp.mech)?;
    let ht = if camp.mech.c > 0.0 { Some(camp.h_transform()?) } else { None };
    let p = &camp.spec.run.params;
    let mut verdicts = Vec::new();
    for name in &checks {
        verdicts.extend(run_check(name, &camp.mech, ht.clone(), &camp.cfg, p)?);
        if camp.spec.run.half_dt {
            verdicts.extend(run_check(name, &camp.mech, ht.clone(), &mc::half_dt(&camp.cfg), p)?);
        }
    }
    let failures = verdicts.iter().filter(|v| !v.pass).count();
    let mut report = String::new();
    for v in &verdicts {
        let _ = writeln!(report, "{}", v.report_line());
    }
    let _ = writeln!(report, "{} verdicts, {failures} failed", verdicts.len());
    write(&camp.out, "verdicts.csv", &mc::verdicts_csv(&verdicts))?;
    write(&camp.out, "report.txt", &report)?;
    let files = ["verdicts.csv", "report.txt"].map(String::from);
    write(&camp.out, "manifest.json", &camp.manifest(&files, serde_json::json!({ "checks": checks, "failures": failures })))?;
    print!("{report}");
    Ok((failures as i32).min(MAX_FAILURES))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = "[mechanism]\nfamily = \"neveu\"\nc = 1.0\n";
        assert!(CampaignSpec::parse(ok).is_ok());
        assert!(CampaignSpec::parse("[mechanism]\nfamily = \"neveu\"\nc = 1.0\nbogus = 2\n").is_err());
        assert!(CampaignSpec::parse(&format!("{ok}[sim]\ndtt = 0.1\n")).is_err());
        assert!(CampaignSpec::parse(&format!("{ok}[run]\nparams = {{ zz = 1.0 }}\n")).is_err());
    }

    #[test]
    fn family_keys_are_checked() {
        let s = CampaignSpec::parse("[mechanism]\nfamily = \"neveu\"\nc = 1.0\nalpha = 1.5\n").unwrap();
        assert!(s.mechanism.build().is_err());
        let s = CampaignSpec::parse("[mechanism]\nfamily = \"stable\"\nc = 1.0\na = 1.0\n").unwrap();
        assert!(s.mechanism.build().is_err());
    }
}
