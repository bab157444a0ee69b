//! Picard and Euler solvers for
//! `X_t = Z + ∫_0^t α(s, X_s) ds + ∫_0^t β(s, X_s) dB_s + ∫_0^t σ(s) dB^H_s`
//! on a coupled driver ensemble.
//!
//! The fractional term does not depend on the solution, so it is integrated
//! once (Wick–Riemann sums) and shared by every Picard iterate and by the
//! Euler scheme. The Picard map acts path by path, which lets an ensemble be
//! processed in independent chunks whose per-path traces are merged later.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FwnError, Result};
use crate::fbmgen::DriverEnsemble;
use crate::frackernel::{HurstModel, RealFunction};
use crate::rng::{Domain, PathStream};
use crate::stats::{pairwise_sum, MeanEstimate};
use crate::wiscalc::{self, CorpusIntegrand};

/// Built-in coefficient functions `f(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coefficient {
    Zero,
    Const(f64),
    /// `a x`.
    Linear(f64),
    /// `a x + b`.
    Affine(f64, f64),
    /// `sin x`.
    Sin,
    /// `cos x`.
    Cos,
}

impl Coefficient {
    pub fn eval(&self, _t: f64, x: f64) -> f64 {
        match *self {
            Coefficient::Zero => 0.0,
            Coefficient::Const(c) => c,
            Coefficient::Linear(a) => a * x,
            Coefficient::Affine(a, b) => a * x + b,
            Coefficient::Sin => x.sin(),
            Coefficient::Cos => x.cos(),
        }
    }

    /// Smallest `L` with `|f(t,x) - f(t,y)| ≤ L |x - y|`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Coefficient::Zero | Coefficient::Const(_) => 0.0,
            Coefficient::Linear(a) | Coefficient::Affine(a, _) => a.abs(),
            Coefficient::Sin | Coefficient::Cos => 1.0,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Coefficient::Zero => "zero".into(),
            Coefficient::Const(c) => format!("const:{c}"),
            Coefficient::Linear(a) => format!("linear:a={a}"),
            Coefficient::Affine(a, b) => format!("affine:a={a},b={b}"),
            Coefficient::Sin => "sin".into(),
            Coefficient::Cos => "cos".into(),
        }
    }
}

fn named_params(body: &str, names: &[&str]) -> Result<Vec<f64>> {
    let mut out = vec![None; names.len()];
    for part in body.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| FwnError::Config(format!("expected name=value, got '{part}'")))?;
        let idx = names
            .iter()
            .position(|n| *n == k.trim())
            .ok_or_else(|| FwnError::Config(format!("unknown parameter '{k}'")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| FwnError::Config(format!("bad number '{v}'")))?;
        out[idx] = Some(v);
    }
    out.into_iter()
        .zip(names)
        .map(|(v, n)| v.ok_or_else(|| FwnError::Config(format!("missing parameter '{n}'"))))
        .collect()
}

impl std::str::FromStr for Coefficient {
    type Err = FwnError;
    fn from_str(s: &str) -> Result<Self> {
        let (head, body) = s.split_once(':').unwrap_or((s, ""));
        match (head, body) {
            ("zero", "") => Ok(Coefficient::Zero),
            ("sin", "") => Ok(Coefficient::Sin),
            ("cos", "") => Ok(Coefficient::Cos),
            ("const", c) => c
                .parse()
                .map(Coefficient::Const)
                .map_err(|_| FwnError::Config(format!("bad constant in '{s}'"))),
            ("linear", p) => Ok(Coefficient::Linear(named_params(p, &["a"])?[0])),
            ("affine", p) => {
                let v = named_params(p, &["a", "b"])?;
                Ok(Coefficient::Affine(v[0], v[1]))
            }
            _ => Err(FwnError::Config(format!("unknown coefficient '{s}'"))),
        }
    }
}

/// Law of the initial value `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialDist {
    Const(f64),
    Normal { mean: f64, sd: f64 },
}

impl InitialDist {
    pub fn mean(&self) -> f64 {
        match *self {
            InitialDist::Const(c) => c,
            InitialDist::Normal { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            InitialDist::Const(_) => 0.0,
            InitialDist::Normal { sd, .. } => sd * sd,
        }
    }

    /// `Z` for global path index `path`, from a stream disjoint from the driver's.
    pub fn sample(&self, seed: u64, domain: Domain, path: u64) -> f64 {
        match *self {
            InitialDist::Const(c) => c,
            InitialDist::Normal { mean, sd } => {
                mean + sd * PathStream::new(seed, domain, path).normal()
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            InitialDist::Const(c) => format!("const:{c}"),
            InitialDist::Normal { mean, sd } => format!("normal:{mean},{sd}"),
        }
    }
}

impl std::str::FromStr for InitialDist {
    type Err = FwnError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || FwnError::Config(format!("bad initial distribution '{s}'"));
        if let Some(c) = s.strip_prefix("const:") {
            return c.parse().map(InitialDist::Const).map_err(|_| bad());
        }
        let body = s.strip_prefix("normal:").ok_or_else(bad)?;
        let (m, sd) = body.split_once(',').ok_or_else(bad)?;
        let mean: f64 = m.trim().parse().map_err(|_| bad())?;
        let sd: f64 = sd.trim().parse().map_err(|_| bad())?;
        if !(sd >= 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(bad());
        }
        Ok(InitialDist::Normal { mean, sd })
    }
}

/// Coefficients and constants of one SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct SdeSpec {
    pub alpha: Coefficient,
    pub beta: Coefficient,
    pub sigma: CorpusIntegrand,
    pub initial: InitialDist,
    /// Declared Lipschitz constant `D`.
    pub lipschitz: f64,
    /// Declared growth constant `C`.
    pub growth: f64,
    pub horizon: f64,
}

/// JSON form: `{"alpha": "linear:a=-1", "beta": "zero", "sigma": "const:1",
/// "Z": "normal:0,1", "T": 1, "D": 1, "C": 2}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSpecFile {
    pub alpha: String,
    pub beta: String,
    pub sigma: String,
    #[serde(rename = "Z")]
    pub z: String,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "D")]
    pub lipschitz: f64,
    #[serde(rename = "C")]
    pub growth: f64,
}

const LATTICE_X: [f64; 13] = [
    -8.0, -4.0, -2.0, -1.0, -0.5, -0.1, 0.0, 0.1, 0.5, 1.0, 2.0, 4.0, 8.0,
];

impl SdeSpec {
    /// Parses and validates the JSON form.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: SdeSpecFile =
            serde_json::from_str(text).map_err(|e| FwnError::Config(format!("spec file: {e}")))?;
        Self::from_file(&file)
    }

    pub fn from_file(file: &SdeSpecFile) -> Result<Self> {
        let sigma = match file.sigma.as_str() {
            "zero" => CorpusIntegrand::Const(0.0),
            s => s
                .parse()
                .map_err(|e: FwnError| FwnError::Config(e.to_string()))?,
        };
        let spec = Self {
            alpha: file.alpha.parse()?,
            beta: file.beta.parse()?,
            sigma,
            initial: file.z.parse()?,
            lipschitz: file.lipschitz,
            growth: file.growth,
            horizon: file.horizon,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_file(&self) -> SdeSpecFile {
        SdeSpecFile {
            alpha: self.alpha.name(),
            beta: self.beta.name(),
            sigma: self.sigma.name(),
            z: self.initial.name(),
            horizon: self.horizon,
            lipschitz: self.lipschitz,
            growth: self.growth,
        }
    }

    /// Canonical JSON, used as a fingerprint in result sidecars.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("spec serializes")
    }

    /// Spot-checks the declared growth and Lipschitz constants on a `(t, x)`
    /// lattice.
    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(FwnError::Config(format!(
                "T must be positive, got {}",
                self.horizon
            )));
        }
        if !(self.lipschitz >= 0.0 && self.growth >= 0.0) {
            return Err(FwnError::Config("D and C must be nonnegative".into()));
        }
        let sigma = self.sigma.profile();
        let slack = 1.0 + 1e-12;
        for k in 0..=4 {
            let t = self.horizon * k as f64 / 4.0;
            let s = sigma.as_ref().map_or(0.0, |p| p.value(t).abs());
            for &x in &LATTICE_X {
                let size = self.alpha.eval(t, x).abs() + self.beta.eval(t, x).abs() + s;
                if size > self.growth * (1.0 + x.abs()) * slack {
                    return Err(FwnError::Config(format!(
                        "growth bound C={} violated at t={t}, x={x}: |α|+|β|+|σ| = {size}",
                        self.growth
                    )));
                }
                for &y in &LATTICE_X {
                    if x == y {
                        continue;
                    }
                    let diff = (self.alpha.eval(t, x) - self.alpha.eval(t, y)).abs()
                        + (self.beta.eval(t, x) - self.beta.eval(t, y)).abs();
                    if diff > self.lipschitz * (x - y).abs() * slack {
                        return Err(FwnError::Config(format!(
                            "Lipschitz bound D={} violated at t={t}, x={x}, y={y}",
                            self.lipschitz
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Picard,
    Euler,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveResult {
    pub method: SolveMethod,
    pub n_paths: usize,
    pub nodes: usize,
    /// `X(t_i)`, row-major `n_paths × nodes`.
    pub paths: Vec<f64>,
    /// `‖Y^(k+1) - Y^(k)‖` in `L²(λ×P)`, `k = 0, 1, ...` (empty for Euler).
    pub iterates_delta: Vec<f64>,
    pub k_used: usize,
    pub converged: bool,
    /// `‖Φ(X) - X‖` in `L²(λ×P)` for the returned solution.
    pub residual: Option<f64>,
}

impl SolveResult {
    pub fn path(&self, p: usize) -> &[f64] {
        &self.paths[p * self.nodes..(p + 1) * self.nodes]
    }

    pub fn terminal(&self) -> Vec<f64> {
        (0..self.n_paths)
            .map(|p| self.path(p)[self.nodes - 1])
            .collect()
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.path(p)[i]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PicardOptions {
    pub k_max: usize,
    pub tol: f64,
}

impl Default for PicardOptions {
    fn default() -> Self {
        Self {
            k_max: 12,
            tol: 1e-4,
        }
    }
}

/// Per-path inputs shared by all iterates.
struct Prepared {
    times: Vec<f64>,
    dt: f64,
    nodes: usize,
    z: Vec<f64>,
    /// Fractional integral `∫_0^t σ dB^H` per node.
    fractional: Vec<f64>,
    /// `ΔB`, `n_paths × steps`; zeros when `β ≡ 0` and none is attached.
    brownian: Vec<f64>,
}

impl Prepared {
    fn new(
        model: &HurstModel,
        spec: &SdeSpec,
        driver: &DriverEnsemble,
        initial: &InitialDist,
        z_domain: Domain,
    ) -> Result<Self> {
        let grid = driver.grid;
        if (grid.horizon() - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(FwnError::Config(format!(
                "driver horizon {} differs from spec T = {}",
                grid.horizon(),
                spec.horizon
            )));
        }
        let needs_b = spec.beta != Coefficient::Zero
            || spec.sigma.kind() != wiscalc::IntegrandKind::Deterministic;
        if needs_b && !driver.coupled {
            return Err(FwnError::Config(
                "this spec needs a coupled driver (m_synthesis generator)".into(),
            ));
        }
        let phi = spec.sigma.materialize(driver)?;
        let fractional = wiscalc::wick_riemann_integral(model, &phi, driver)?.running;
        let m = grid.steps();
        let brownian = if driver.paths_b.is_some() && driver.coupled {
            let mut out = Vec::with_capacity(driver.n_paths * m);
            for p in 0..driver.n_paths {
                out.extend(driver.brownian_increments(p)?);
            }
            out
        } else {
            vec![0.0; driver.n_paths * m]
        };
        let z = (0..driver.n_paths)
            .map(|p| initial.sample(driver.seed, z_domain, driver.first_path + p as u64))
            .collect();
        Ok(Self {
            times: grid.times(),
            dt: grid.dt(),
            nodes: grid.nodes(),
            z,
            fractional,
            brownian,
        })
    }

    fn frac(&self, p: usize) -> &[f64] {
        &self.fractional[p * self.nodes..(p + 1) * self.nodes]
    }

    fn db(&self, p: usize) -> &[f64] {
        let m = self.nodes - 1;
        &self.brownian[p * m..(p + 1) * m]
    }

    /// One application of the Picard map on path `p`.
    fn picard_map(&self, spec: &SdeSpec, p: usize, y: &[f64], out: &mut [f64]) {
        let frac = self.frac(p);
        let db = self.db(p);
        let z = self.z[p];
        let (mut drift, mut brown) = (0.0, 0.0);
        out[0] = z + frac[0];
        let mut a_prev = spec.alpha.eval(self.times[0], y[0]);
        for i in 0..self.nodes - 1 {
            let a_next = spec.alpha.eval(self.times[i + 1], y[i + 1]);
            drift += 0.5 * self.dt * (a_prev + a_next);
            brown += spec.beta.eval(self.times[i], y[i]) * db[i];
            out[i + 1] = z + drift + brown + frac[i + 1];
            a_prev = a_next;
        }
    }

    fn euler(&self, spec: &SdeSpec, p: usize) -> Vec<f64> {
        let frac = self.frac(p);
        let db = self.db(p);
        let mut x = Vec::with_capacity(self.nodes);
        x.push(self.z[p]);
        for i in 0..self.nodes - 1 {
            let (t, xi) = (self.times[i], x[i]);
            let next = xi
                + spec.alpha.eval(t, xi) * self.dt
                + spec.beta.eval(t, xi) * db[i]
                + (frac[i + 1] - frac[i]);
            x.push(next);
        }
        x
    }

    fn time_integral_sq(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
        self.dt * (pairwise_sum(&d2) - 0.5 * (d2[0] + d2[self.nodes - 1]))
    }
}

/// Picard history of one path: `∫(Y^(k+1) - Y^(k))²` for `k = 0..=k_max`
/// and the terminal values of `Y^(0)..=Y^(k_max+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicardTrace {
    pub sq_delta: Vec<f64>,
    pub terminal: Vec<f64>,
    /// `∫ (Y^(k))² dt` for the same iterates as `terminal`.
    pub sq_norm: Vec<f64>,
}

fn picard_path(
    spec: &SdeSpec,
    prep: &Prepared,
    p: usize,
    iterations: usize,
) -> (PicardTrace, Vec<f64>) {
    let zeros = vec![0.0; prep.nodes];
    let mut y = vec![prep.z[p]; prep.nodes];
    let mut next = vec![0.0; prep.nodes];
    let mut trace = PicardTrace {
        sq_delta: Vec::with_capacity(iterations),
        terminal: vec![y[prep.nodes - 1]],
        sq_norm: vec![prep.time_integral_sq(&y, &zeros)],
    };
    for _ in 0..iterations {
        prep.picard_map(spec, p, &y, &mut next);
        trace.sq_delta.push(prep.time_integral_sq(&next, &y));
        trace.terminal.push(next[prep.nodes - 1]);
        trace.sq_norm.push(prep.time_integral_sq(&next, &zeros));
        std::mem::swap(&mut y, &mut next);
    }
    (trace, y)
}

/// Picard traces with `k_max + 1` iterations on every path.
pub fn picard_traces(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
    k_max: usize,
) -> Result<Vec<PicardTrace>> {
    let prep = Prepared::new(model, spec, driver, &spec.initial, Domain::InitialValue)?;
    Ok((0..driver.n_paths)
        .into_par_iter()
        .map(|p| picard_path(spec, &prep, p, k_max + 1).0)
        .collect())
}

/// Ensemble view of a set of Picard traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PicardSummary {
    pub iterates_delta: Vec<f64>,
    pub k_used: usize,
    pub converged: bool,
    pub residual: f64,
}

impl PicardSummary {
    /// Merges traces (in path order) and applies the stopping rule: the
    /// returned iterate is the first `Y^(k)` with `‖Φ(Y^(k)) - Y^(k)‖ < tol`.
    pub fn from_traces(traces: &[PicardTrace], opts: &PicardOptions) -> Result<Self> {
        let n = traces.len() as f64;
        let len = traces.first().map_or(0, |t| t.sq_delta.len());
        let deltas: Vec<f64> = (0..len)
            .map(|k| {
                let col: Vec<f64> = traces.iter().map(|t| t.sq_delta[k]).collect();
                (pairwise_sum(&col) / n).sqrt()
            })
            .collect();
        Self::from_deltas(deltas, opts)
    }

    pub fn from_deltas(deltas: Vec<f64>, opts: &PicardOptions) -> Result<Self> {
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(FwnError::Numeric {
                message: "non-finite Picard increment".into(),
                value: f64::NAN,
            });
        }
        let mut growth_run = 0;
        for k in 3..deltas.len() {
            if deltas[k] > deltas[k - 1] {
                growth_run += 1;
                if growth_run >= 3 {
                    return Err(FwnError::Divergence {
                        lipschitz: f64::NAN,
                        horizon: f64::NAN,
                        deltas: deltas[..=k].to_vec(),
                    });
                }
            } else {
                growth_run = 0;
            }
        }
        let last = deltas.len().saturating_sub(1).min(opts.k_max);
        let hit = deltas[..=last].iter().position(|d| *d < opts.tol);
        let k_used = hit.unwrap_or(last);
        Ok(Self {
            residual: deltas[k_used],
            converged: hit.is_some(),
            k_used,
            iterates_delta: deltas,
        })
    }
}

fn divergence_context(err: FwnError, spec: &SdeSpec) -> FwnError {
    match err {
        FwnError::Divergence { deltas, .. } => FwnError::Divergence {
            lipschitz: spec.lipschitz,
            horizon: spec.horizon,
            deltas,
        },
        e => e,
    }
}

/// Picard iteration `Y^(k+1) = Φ(Y^(k))`, `Y^(0) = Z`, stopped at the first
/// `Y^(k)` whose next increment is below `tol` (or at `k_max`).
pub fn picard_solve(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
    opts: &PicardOptions,
) -> Result<SolveResult> {
    let prep = Prepared::new(model, spec, driver, &spec.initial, Domain::InitialValue)?;
    let traces: Vec<PicardTrace> = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| picard_path(spec, &prep, p, opts.k_max + 1).0)
        .collect();
    let summary =
        PicardSummary::from_traces(&traces, opts).map_err(|e| divergence_context(e, spec))?;
    let rows: Vec<Vec<f64>> = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| picard_path(spec, &prep, p, summary.k_used).1)
        .collect();
    Ok(SolveResult {
        method: SolveMethod::Picard,
        n_paths: driver.n_paths,
        nodes: prep.nodes,
        paths: rows.concat(),
        iterates_delta: summary.iterates_delta,
        k_used: summary.k_used,
        converged: summary.converged,
        residual: Some(summary.residual),
    })
}

/// `X_{i+1} = X_i + α(t_i, X_i)Δt + β(t_i, X_i)ΔB_i + σ(t_i)◊ΔB^H_i`.
pub fn euler_solve(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
) -> Result<SolveResult> {
    let prep = Prepared::new(model, spec, driver, &spec.initial, Domain::InitialValue)?;
    let rows: Vec<Vec<f64>> = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| prep.euler(spec, p))
        .collect();
    Ok(SolveResult {
        method: SolveMethod::Euler,
        n_paths: driver.n_paths,
        nodes: prep.nodes,
        paths: rows.concat(),
        iterates_delta: Vec::new(),
        k_used: 0,
        converged: true,
        residual: None,
    })
}

/// Measured Picard increments against the factorial envelope
/// `(A₂^(k+1) T^(k+2) / (k+2)!)^(1/2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub deltas: Vec<f64>,
    /// `A₂`, the smallest value for which the envelope covers the first two deltas.
    pub a2: f64,
    pub envelope: Vec<f64>,
    /// `delta_(k+1) / delta_k` for `k ≥ 2` (NaN where `delta_k = 0`).
    pub ratios: Vec<f64>,
    /// `Σ_(j>k) delta_j` for every `k`.
    pub tail_sums: Vec<f64>,
    /// Largest ratio over `k ∈ [2, 6]`.
    pub max_ratio: f64,
    pub geometric: bool,
}

fn envelope_value(a2: f64, t: f64, k: usize) -> f64 {
    let mut v = a2.powi(k as i32 + 1) * t.powi(k as i32 + 2);
    for j in 2..=k + 2 {
        v /= j as f64;
    }
    v.sqrt()
}

impl ContractionReport {
    pub fn from_deltas(deltas: Vec<f64>, horizon: f64) -> Self {
        let fit = |k: usize| -> f64 {
            if deltas.len() <= k || deltas[k] == 0.0 {
                return 0.0;
            }
            // δ_k² (k+2)! / T^(k+2) = A₂^(k+1)
            let mut v = deltas[k] * deltas[k] / horizon.powi(k as i32 + 2);
            for j in 2..=k + 2 {
                v *= j as f64;
            }
            v.powf(1.0 / (k as f64 + 1.0))
        };
        let a2 = fit(0).max(fit(1));
        let envelope = (0..deltas.len())
            .map(|k| envelope_value(a2, horizon, k))
            .collect();
        let ratios: Vec<f64> = (2..deltas.len().saturating_sub(1))
            .map(|k| {
                if deltas[k] == 0.0 {
                    f64::NAN
                } else {
                    deltas[k + 1] / deltas[k]
                }
            })
            .collect();
        let window: Vec<f64> = ratios.iter().take(5).copied().collect();
        let max_ratio = window
            .iter()
            .copied()
            .filter(|r| r.is_finite())
            .fold(0.0, f64::max);
        let all_zero = deltas.iter().skip(1).all(|d| *d == 0.0);
        let tail_sums = (0..deltas.len())
            .map(|k| deltas[k + 1..].iter().sum())
            .collect();
        Self {
            geometric: all_zero || (!window.is_empty() && max_ratio <= 0.9),
            deltas,
            a2,
            envelope,
            ratios,
            tail_sums,
            max_ratio,
        }
    }
}

pub fn contraction_experiment(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
    k_max: usize,
) -> Result<ContractionReport> {
    let traces = picard_traces(model, spec, driver, k_max)?;
    let n = traces.len() as f64;
    let deltas = (0..=k_max)
        .map(|k| {
            let col: Vec<f64> = traces.iter().map(|t| t.sq_delta[k]).collect();
            (pairwise_sum(&col) / n).sqrt()
        })
        .collect();
    Ok(ContractionReport::from_deltas(deltas, spec.horizon))
}

/// `w(t) = E|X_t - X̂_t|²` against `3 E|Z - Ẑ|² exp(3 T D² t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub times: Vec<f64>,
    pub w: Vec<f64>,
    pub w_se: Vec<f64>,
    pub bound: Vec<f64>,
    pub initial_gap: f64,
    pub pass: bool,
}

/// Solves with `Z` and with `alt` on the same driver. When `shared_noise`
/// is set, `Ẑ` reuses the standard normal behind `Z`, so `Ẑ = Z + shift`
/// for equal-variance normals.
pub fn gronwall_experiment(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
    alt: &InitialDist,
    shared_noise: bool,
    opts: &PicardOptions,
) -> Result<GronwallReport> {
    let prep = Prepared::new(model, spec, driver, &spec.initial, Domain::InitialValue)?;
    let alt_domain = if shared_noise {
        Domain::InitialValue
    } else {
        Domain::InitialValueAlt
    };
    let prep_alt = Prepared::new(model, spec, driver, alt, alt_domain)?;
    let iterations = opts.k_max + 1;
    let diffs: Vec<Vec<f64>> = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| {
            let x = picard_path(spec, &prep, p, iterations).1;
            let y = picard_path(spec, &prep_alt, p, iterations).1;
            x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).collect()
        })
        .collect();
    let gaps: Vec<f64> = prep
        .z
        .iter()
        .zip(&prep_alt.z)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    let initial_gap = MeanEstimate::from_samples(&gaps).mean;
    let d2 = spec.lipschitz * spec.lipschitz;
    let times = driver.grid.times();
    let mut w = Vec::with_capacity(times.len());
    let mut w_se = Vec::with_capacity(times.len());
    let mut bound = Vec::with_capacity(times.len());
    let mut pass = true;
    for (i, &t) in times.iter().enumerate() {
        let col: Vec<f64> = diffs.iter().map(|d| d[i]).collect();
        let est = MeanEstimate::from_samples(&col);
        let b = 3.0 * initial_gap * (3.0 * spec.horizon * d2 * t).exp();
        let rel = if est.mean > 0.0 {
            est.std_error / est.mean
        } else {
            0.0
        };
        pass &= est.mean <= b * (1.0 + 3.0 * rel);
        w.push(est.mean);
        w_se.push(est.std_error);
        bound.push(b);
    }
    Ok(GronwallReport {
        times,
        w,
        w_se,
        bound,
        initial_gap,
        pass,
    })
}

/// Linear-SDE oracle for `α(t,x) = a x`, `β ≡ 0`, deterministic `σ`:
/// `X_T = e^(aT) Z + ∫_0^T e^(a(T-s)) σ(s) dB^H_s`, evaluated through the
/// Wiener route on the same driver. Returns per-path `X_T`.
pub fn linear_oracle_terminal(
    model: &HurstModel,
    spec: &SdeSpec,
    driver: &DriverEnsemble,
) -> Result<Vec<f64>> {
    let (a, sigma) = linear_parts(spec)?;
    let t_end = spec.horizon;
    let phi = crate::frackernel::Profile::new(move |s| (a * (t_end - s)).exp() * sigma.value(s));
    let integrand = wiscalc::Integrand::deterministic(phi, &driver.grid, driver.n_paths);
    let x = wiscalc::wiener_integral(model, &integrand, driver)?;
    let growth = (a * t_end).exp();
    Ok((0..driver.n_paths)
        .map(|p| {
            let z = spec.initial.sample(
                driver.seed,
                Domain::InitialValue,
                driver.first_path + p as u64,
            );
            growth * z + x.terminal[p]
        })
        .collect())
}

/// Closed-form `(E X_T, Var X_T)` of the linear SDE.
pub fn linear_oracle_moments(model: &HurstModel, spec: &SdeSpec) -> Result<(f64, f64)> {
    let (a, sigma) = linear_parts(spec)?;
    let t_end = spec.horizon;
    let phi = crate::frackernel::Profile::new(move |s| (a * (t_end - s)).exp() * sigma.value(s));
    let growth = (a * t_end).exp();
    let noise = wiscalc::expected_square(model, &phi, t_end)?;
    Ok((
        growth * spec.initial.mean(),
        growth * growth * spec.initial.variance() + noise,
    ))
}

fn linear_parts(spec: &SdeSpec) -> Result<(f64, crate::frackernel::Profile)> {
    let a = match spec.alpha {
        Coefficient::Linear(a) => a,
        Coefficient::Zero => 0.0,
        _ => {
            return Err(FwnError::Config(
                "linear oracle needs alpha = linear:a=..".into(),
            ))
        }
    };
    if spec.beta != Coefficient::Zero {
        return Err(FwnError::Config("linear oracle needs beta = zero".into()));
    }
    let sigma = spec
        .sigma
        .profile()
        .ok_or_else(|| FwnError::Config("linear oracle needs a deterministic sigma".into()))?;
    Ok((a, sigma))
}
