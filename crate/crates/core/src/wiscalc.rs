//! Wick–Itô–Skorohod integrals `∫ φ dB^H` on driver ensembles and the
//! second-moment formulas that govern them.
//!
//! Two discretizations are provided:
//!
//! * the Wiener route for deterministic `φ`, `∫ φ dB^H = ∫ Mφ dB`, which on
//!   an M-synthesis driver can be evaluated against the very Brownian noise
//!   that built `B^H`;
//! * Wick–Riemann sums `Σ [φ(t_i) ΔB^H_i - κ_i]` for adapted integrands,
//!   where `κ_i = Cov(φ(t_i), ΔB^H_i)` turns the ordinary product into the
//!   Wick product of two Gaussians.
//!
//! For an adapted first-chaos integrand the second moment is
//! `E X² = Σ_ij E[φ_i φ_j] R_ij + Σ_ij κ_ij κ_ji`, with `R` the fGn
//! covariance and `κ_ij = Cov(φ_i, ΔB^H_j)`. The first sum is the product-rule
//! term `E ∫ 2φ M²(φχ_[0,s])(s) ds`; the second (trace) term vanishes for
//! deterministic integrands and is reported separately.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{FwnError, Result};
use crate::fbmgen::{fgn_autocov, DriverEnsemble, SpatialPartition, TimeGrid};
use crate::frackernel::{self, HurstModel, Profile, RealFunction, DEFAULT_QUAD_TOL};
use crate::quad::{self, QuadOptions};
use crate::stats::{covariance_estimate, MeanEstimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrandKind {
    Deterministic,
    FirstChaos,
    PathwiseAdapted,
}

#[derive(Debug, Clone)]
enum Values {
    Shared(Vec<f64>),
    PerPath(Vec<f64>),
}

/// Node samples `φ(t_i, ω)` of an integrand on one driver ensemble.
#[derive(Debug, Clone)]
pub struct Integrand {
    kind: IntegrandKind,
    nodes: usize,
    n_paths: usize,
    values: Values,
    profile: Option<Profile>,
    chaos_kernel: Option<Profile>,
}

impl Integrand {
    /// Deterministic `φ`, identical on every path.
    pub fn deterministic(profile: Profile, grid: &TimeGrid, n_paths: usize) -> Self {
        let values = grid.times().iter().map(|&t| profile.value(t)).collect();
        Self {
            kind: IntegrandKind::Deterministic,
            nodes: grid.nodes(),
            n_paths,
            values: Values::Shared(values),
            profile: Some(profile),
            chaos_kernel: None,
        }
    }

    /// `φ(t_i) = Σ_{j<i} h(t_j) ΔB_j` on the driver's Brownian increments.
    pub fn first_chaos(kernel: Profile, driver: &DriverEnsemble) -> Result<Self> {
        let grid = driver.grid;
        let h: Vec<f64> = grid.times()[..grid.steps()]
            .iter()
            .map(|&t| kernel.value(t))
            .collect();
        let n = grid.nodes();
        let mut values = vec![0.0; driver.n_paths * n];
        for p in 0..driver.n_paths {
            let db = driver.brownian_increments(p)?;
            let row = &mut values[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (i, (hj, dbj)) in h.iter().zip(&db).enumerate() {
                acc += hj * dbj;
                row[i + 1] = acc;
            }
        }
        Ok(Self {
            kind: IntegrandKind::FirstChaos,
            nodes: n,
            n_paths: driver.n_paths,
            values: Values::PerPath(values),
            profile: None,
            chaos_kernel: Some(kernel),
        })
    }

    /// `φ(t_i) = f(i, B[..=i], B^H[..=i])`; `f` only sees the past, so the
    /// integrand is adapted by construction.
    pub fn pathwise_adapted<F>(driver: &DriverEnsemble, f: F) -> Self
    where
        F: Fn(usize, Option<&[f64]>, &[f64]) -> f64,
    {
        let n = driver.nodes();
        let mut values = vec![0.0; driver.n_paths * n];
        for p in 0..driver.n_paths {
            let bh = driver.bh(p);
            let b = driver.b(p);
            for i in 0..n {
                values[p * n + i] = f(i, b.map(|b| &b[..=i]), &bh[..=i]);
            }
        }
        Self {
            kind: IntegrandKind::PathwiseAdapted,
            nodes: n,
            n_paths: driver.n_paths,
            values: Values::PerPath(values),
            profile: None,
            chaos_kernel: None,
        }
    }

    pub fn kind(&self) -> IntegrandKind {
        self.kind
    }
    pub fn profile(&self) -> Option<&Profile> {
        self.profile.as_ref()
    }
    pub fn chaos_kernel(&self) -> Option<&Profile> {
        self.chaos_kernel.as_ref()
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn value(&self, path: usize, node: usize) -> f64 {
        self.path(path)[node]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        match &self.values {
            Values::Shared(v) => v,
            Values::PerPath(v) => &v[path * self.nodes..(path + 1) * self.nodes],
        }
    }

    fn check_driver(&self, driver: &DriverEnsemble) -> Result<()> {
        if driver.nodes() != self.nodes {
            return Err(FwnError::Config(format!(
                "integrand has {} nodes, driver has {}",
                self.nodes,
                driver.nodes()
            )));
        }
        if matches!(self.values, Values::PerPath(_)) && driver.n_paths != self.n_paths {
            return Err(FwnError::Config(format!(
                "integrand has {} paths, driver has {}",
                self.n_paths, driver.n_paths
            )));
        }
        Ok(())
    }
}

/// The integrands used throughout the verification suite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusIntegrand {
    /// `φ ≡ c`.
    Const(f64),
    /// `φ(s) = s`.
    Identity,
    /// `φ(s) = sin s`.
    Sin,
    /// `φ(s) = cos s`.
    Cos,
    /// `φ(s) = B(s)`.
    Brownian,
    /// `φ(s) = ∫_0^s e^(-u) dB(u)`.
    ExpKernel,
}

impl CorpusIntegrand {
    /// The standard corpus.
    pub fn corpus() -> Vec<CorpusIntegrand> {
        vec![
            CorpusIntegrand::Const(1.0),
            CorpusIntegrand::Identity,
            CorpusIntegrand::Sin,
            CorpusIntegrand::Brownian,
            CorpusIntegrand::ExpKernel,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            CorpusIntegrand::Const(c) => format!("const:{c}"),
            CorpusIntegrand::Identity => "identity".into(),
            CorpusIntegrand::Sin => "sin".into(),
            CorpusIntegrand::Cos => "cos".into(),
            CorpusIntegrand::Brownian => "brownian".into(),
            CorpusIntegrand::ExpKernel => "exp_kernel".into(),
        }
    }

    pub fn kind(&self) -> IntegrandKind {
        match self {
            CorpusIntegrand::Brownian | CorpusIntegrand::ExpKernel => IntegrandKind::FirstChaos,
            _ => IntegrandKind::Deterministic,
        }
    }

    /// `φ` itself for deterministic entries.
    pub fn profile(&self) -> Option<Profile> {
        match *self {
            CorpusIntegrand::Const(c) => Some(Profile::new(move |_| c)),
            CorpusIntegrand::Identity => Some(Profile::new(|s| s)),
            CorpusIntegrand::Sin => Some(Profile::new(f64::sin)),
            CorpusIntegrand::Cos => Some(Profile::new(f64::cos)),
            _ => None,
        }
    }

    /// `h` with `φ(s) = ∫_0^s h dB` for first-chaos entries.
    pub fn kernel(&self) -> Option<Profile> {
        match self {
            CorpusIntegrand::Brownian => Some(Profile::new(|_| 1.0)),
            CorpusIntegrand::ExpKernel => Some(Profile::new(|u| (-u).exp())),
            _ => None,
        }
    }

    /// `φ ≥ 0` on `[0, t]` for every ω.
    pub fn nonnegative_on(&self, t: f64) -> bool {
        match *self {
            CorpusIntegrand::Const(c) => c >= 0.0,
            CorpusIntegrand::Identity => true,
            CorpusIntegrand::Sin => t <= std::f64::consts::PI,
            CorpusIntegrand::Cos => t <= std::f64::consts::FRAC_PI_2,
            _ => false,
        }
    }

    pub fn materialize(&self, driver: &DriverEnsemble) -> Result<Integrand> {
        match (self.profile(), self.kernel()) {
            (Some(p), _) => Ok(Integrand::deterministic(p, &driver.grid, driver.n_paths)),
            (None, Some(h)) => Integrand::first_chaos(h, driver),
            (None, None) => unreachable!("every corpus entry has a profile or a kernel"),
        }
    }

    /// `E ∫_0^t φ²(s) ds`.
    pub fn mean_square_integral(&self, t: f64) -> Result<f64> {
        let opts = QuadOptions::default().with_abs_tol(1e-13);
        if let Some(p) = self.profile() {
            return Ok(quad::integrate(&|s: f64| p.value(s).powi(2), 0.0, t, &opts)?.value);
        }
        let h = self.kernel().expect("first-chaos entry");
        // E φ(s)² = ∫_0^s h², so E ∫_0^t φ² = ∫_0^t (t - u) h(u)² du.
        Ok(quad::integrate(&|u: f64| (t - u) * h.value(u).powi(2), 0.0, t, &opts)?.value)
    }
}

impl std::str::FromStr for CorpusIntegrand {
    type Err = FwnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "s" => Ok(CorpusIntegrand::Identity),
            "sin" => Ok(CorpusIntegrand::Sin),
            "cos" => Ok(CorpusIntegrand::Cos),
            "brownian" | "B" => Ok(CorpusIntegrand::Brownian),
            "exp_kernel" => Ok(CorpusIntegrand::ExpKernel),
            other => match other.strip_prefix("const:") {
                Some(c) => c
                    .parse()
                    .map(CorpusIntegrand::Const)
                    .map_err(|_| FwnError::Usage(format!("bad constant in '{other}'"))),
                None => Err(FwnError::Usage(format!("unknown integrand '{other}'"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WisMethod {
    WienerMTransform,
    WickRiemann,
}

#[derive(Debug, Clone)]
pub struct WisIntegralResult {
    pub method: WisMethod,
    pub n_paths: usize,
    pub nodes: usize,
    /// `X(T)` per path.
    pub terminal: Vec<f64>,
    /// `X(t_i)`, row-major `n_paths × nodes`.
    pub running: Vec<f64>,
    /// `Σ_{k<i} κ_k` per node.
    pub correction_total: Vec<f64>,
    /// Wick correction estimated from the ensemble rather than known exactly.
    pub approximate: bool,
}

impl WisIntegralResult {
    pub fn path(&self, p: usize) -> &[f64] {
        &self.running[p * self.nodes..(p + 1) * self.nodes]
    }

    /// `X(t_i)` across paths.
    pub fn column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.path(p)[i]).collect()
    }
}

/// Weights of `M(φχ_[0,T])` on the noise cells of an M-synthesis driver:
/// `∫_cell M(φχ_[0,T]) / sqrt(|cell|)` for the inside and outer cells, and
/// `∫_0^T φ` times the far-tail scales.
#[derive(Debug, Clone)]
pub struct TerminalWeights {
    pub inside: Vec<f64>,
    pub outer: Vec<f64>,
    pub tails: (f64, f64),
}

impl TerminalWeights {
    /// Weights for the partition an M-synthesis `driver` was built on.
    pub fn for_driver(model: &HurstModel, phi: &Profile, driver: &DriverEnsemble) -> Result<Self> {
        let partition = driver.partition.ok_or_else(|| {
            FwnError::Config("M-transform route needs an M-synthesis driver".into())
        })?;
        Self::new(model, phi, &driver.grid, &partition)
    }

    pub fn new(
        model: &HurstModel,
        phi: &Profile,
        grid: &TimeGrid,
        partition: &SpatialPartition,
    ) -> Result<Self> {
        let grid = *grid;
        let t_end = grid.horizon();
        let p = model.m_prefactor();
        let a = model.exponent();
        let scale = model.path_scale();
        let prof = |x: f64| x.signum() * x.abs().powf(a);
        let opts = QuadOptions {
            abs_tol: 1e-11,
            rel_tol: 1e-10,
            max_intervals: 4000,
        };
        let mut phi_breaks = phi.breakpoints();
        phi_breaks.retain(|b| *b > 0.0 && *b < t_end);
        let cell = |lo: f64, hi: f64| -> Result<f64> {
            let g = |y: f64| phi.value(y) * (prof(hi - y) - prof(lo - y));
            let mut breaks = phi_breaks.clone();
            breaks.extend([lo, hi]);
            let v = quad::integrate_with_breaks(&g, 0.0, t_end, &breaks, &opts)?.value;
            Ok(scale * p * v / (hi - lo).sqrt())
        };
        let times = grid.times();
        let inside = (0..grid.steps())
            .into_par_iter()
            .map(|j| cell(times[j], times[j + 1]))
            .collect::<Result<Vec<_>>>()?;
        let outer = partition
            .outer_cells(&grid)
            .into_par_iter()
            .map(|(lo, hi)| cell(lo, hi))
            .collect::<Result<Vec<_>>>()?;
        let mass =
            quad::integrate_with_breaks(&|y: f64| phi.value(y), 0.0, t_end, &phi_breaks, &opts)?
                .value;
        let (l, r) = partition.tail_scales(model, &grid);
        Ok(Self {
            inside,
            outer,
            tails: (scale * mass * l, scale * mass * r),
        })
    }

    /// `∫ M(φχ_[0,T]) dB` on path `p`.
    pub fn apply(&self, driver: &DriverEnsemble, p: usize) -> Result<f64> {
        let db = driver.brownian_increments(p)?;
        let far = driver
            .far(p)
            .ok_or_else(|| FwnError::Config("driver has no far-field noise".into()))?;
        let inv_sd = 1.0 / driver.grid.dt().sqrt();
        let inside: f64 = self
            .inside
            .iter()
            .zip(&db)
            .map(|(w, d)| w * d * inv_sd)
            .sum();
        let k = self.outer.len();
        let outer: f64 = self.outer.iter().zip(&far[..k]).map(|(w, z)| w * z).sum();
        Ok(inside + outer + self.tails.0 * far[k] + self.tails.1 * far[k + 1])
    }
}

/// `X(t) = ∫_0^t φ dB^H` for deterministic `φ`.
///
/// Running values are Stieltjes sums `Σ_{k<i} φ̄_k ΔB^H_k` with Simpson cell
/// averages `φ̄_k`; the terminal value is `∫ M(φχ_[0,T]) dB` evaluated on the
/// driver's own Brownian noise.
pub fn wiener_integral(
    model: &HurstModel,
    phi: &Integrand,
    driver: &DriverEnsemble,
) -> Result<WisIntegralResult> {
    let profile = phi.profile().ok_or_else(|| {
        FwnError::Contract(
            "wiener_integral takes deterministic integrands; use wick_riemann_integral".into(),
        )
    })?;
    let weights = TerminalWeights::for_driver(model, profile, driver)?;
    wiener_integral_with(phi, driver, &weights)
}

/// [`wiener_integral`] with precomputed terminal weights, for reuse across
/// ensemble chunks.
pub fn wiener_integral_with(
    phi: &Integrand,
    driver: &DriverEnsemble,
    weights: &TerminalWeights,
) -> Result<WisIntegralResult> {
    let profile = match (phi.kind, phi.profile()) {
        (IntegrandKind::Deterministic, Some(p)) => p,
        _ => {
            return Err(FwnError::Contract(
                "wiener_integral takes deterministic integrands; use wick_riemann_integral".into(),
            ))
        }
    };
    phi.check_driver(driver)?;
    if driver.paths_b.is_none() {
        return Err(FwnError::Config(
            "wiener_integral needs Brownian increments (use the m_synthesis generator)".into(),
        ));
    }
    let grid = driver.grid;
    let times = grid.times();
    let avg: Vec<f64> = times
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            (profile.value(w[0]) + 4.0 * profile.value(mid) + profile.value(w[1])) / 6.0
        })
        .collect();
    if weights.inside.len() != grid.steps() {
        return Err(FwnError::Config(
            "terminal weights built for another grid".into(),
        ));
    }
    let n = grid.nodes();
    let rows = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut row = stieltjes(&avg, &driver.fractional_increments(p));
            let terminal = weights.apply(driver, p)?;
            row.push(terminal);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut running = Vec::with_capacity(driver.n_paths * n);
    let mut terminal = Vec::with_capacity(driver.n_paths);
    for mut row in rows {
        terminal.push(row.pop().unwrap());
        running.extend(row);
    }
    Ok(WisIntegralResult {
        method: WisMethod::WienerMTransform,
        n_paths: driver.n_paths,
        nodes: n,
        terminal,
        running,
        correction_total: vec![0.0; n],
        approximate: false,
    })
}

fn stieltjes(phi: &[f64], dbh: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(dbh.len() + 2);
    row.push(0.0);
    let mut acc = 0.0;
    for (f, d) in phi.iter().zip(dbh) {
        acc += f * d;
        row.push(acc);
    }
    row
}

fn wick_sums(
    phi: &Integrand,
    driver: &DriverEnsemble,
    kappa: &[f64],
    method: WisMethod,
    approximate: bool,
) -> WisIntegralResult {
    let n = driver.nodes();
    let rows: Vec<Vec<f64>> = (0..driver.n_paths)
        .into_par_iter()
        .map(|p| {
            let dbh = driver.fractional_increments(p);
            let vals = phi.path(p);
            let mut row = Vec::with_capacity(n);
            row.push(0.0);
            let mut acc = 0.0;
            for i in 0..n - 1 {
                acc += vals[i] * dbh[i] - kappa[i];
                row.push(acc);
            }
            row
        })
        .collect();
    let terminal = rows.iter().map(|r| r[n - 1]).collect();
    let mut correction_total = Vec::with_capacity(n);
    correction_total.push(0.0);
    let mut acc = 0.0;
    for k in kappa {
        acc += k;
        correction_total.push(acc);
    }
    WisIntegralResult {
        method,
        n_paths: driver.n_paths,
        nodes: n,
        terminal,
        running: rows.concat(),
        correction_total,
        approximate,
    }
}

/// `Cov(ΔB_j, ΔB^H_i)` on an M-synthesis driver, row-major `j × i`
/// (`steps × steps`).
pub fn brownian_fractional_cross(model: &HurstModel, grid: &TimeGrid) -> Vec<f64> {
    let m = grid.steps();
    let times = grid.times();
    let scale = model.path_scale();
    let cell = |t: f64, j: usize| {
        scale * frackernel::m_indicator_cell_integral(model, t, times[j], times[j + 1])
    };
    let mut c = vec![0.0; m * m];
    c.par_chunks_mut(m).enumerate().for_each(|(j, row)| {
        let mut prev = cell(times[0], j);
        for (i, out) in row.iter_mut().enumerate() {
            let next = cell(times[i + 1], j);
            *out = next - prev;
            prev = next;
        }
    });
    c
}

/// Exact Wick corrections `κ_i = Σ_{j<i} h(t_j) Cov(ΔB_j, ΔB^H_i)` for a
/// first-chaos integrand on an M-synthesis driver.
pub fn first_chaos_corrections(model: &HurstModel, kernel: &Profile, grid: &TimeGrid) -> Vec<f64> {
    let m = grid.steps();
    let times = grid.times();
    let cross = brownian_fractional_cross(model, grid);
    (0..m)
        .map(|i| {
            (0..i)
                .map(|j| kernel.value(times[j]) * cross[j * m + i])
                .sum()
        })
        .collect()
}

/// `X(T) = Σ_i [φ(t_i) ΔB^H_i - κ_i]` with exact `κ_i`.
///
/// Deterministic integrands are the degenerate case `κ ≡ 0`.
pub fn wick_riemann_integral(
    model: &HurstModel,
    phi: &Integrand,
    driver: &DriverEnsemble,
) -> Result<WisIntegralResult> {
    phi.check_driver(driver)?;
    let m = driver.grid.steps();
    let kappa = match phi.kind {
        IntegrandKind::Deterministic => vec![0.0; m],
        IntegrandKind::FirstChaos => {
            if !driver.coupled {
                return Err(FwnError::Config(
                    "first-chaos integrands need a coupled (m_synthesis) driver".into(),
                ));
            }
            first_chaos_corrections(model, phi.chaos_kernel().unwrap(), &driver.grid)
        }
        IntegrandKind::PathwiseAdapted => return Err(FwnError::Contract(
            "no exact Wick correction for pathwise adapted integrands; use wick_riemann_adapted"
                .into(),
        )),
    };
    Ok(wick_sums(
        phi,
        driver,
        &kappa,
        WisMethod::WickRiemann,
        false,
    ))
}

/// Wick–Riemann sums with `κ̂_i = sample Cov(φ(t_i), ΔB^H_i)`; exact in law
/// only for Gaussian `φ(t_i)`, hence flagged approximate.
pub fn wick_riemann_adapted(phi: &Integrand, driver: &DriverEnsemble) -> Result<WisIntegralResult> {
    phi.check_driver(driver)?;
    if driver.n_paths < 2 {
        return Err(FwnError::Config(
            "ensemble correction needs at least two paths".into(),
        ));
    }
    let m = driver.grid.steps();
    let incs: Vec<Vec<f64>> = (0..driver.n_paths)
        .map(|p| driver.fractional_increments(p))
        .collect();
    let kappa: Vec<f64> = (0..m)
        .into_par_iter()
        .map(|i| {
            let f: Vec<f64> = (0..driver.n_paths).map(|p| phi.value(p, i)).collect();
            let d: Vec<f64> = incs.iter().map(|row| row[i]).collect();
            covariance_estimate(&f, &d).mean
        })
        .collect();
    Ok(wick_sums(phi, driver, &kappa, WisMethod::WickRiemann, true))
}

/// `E X²(t) = ∫_0^t 2φ(s) M²(φχ_[0,s])(s) ds = c ∬_[0,t]² φ(s)φ(r)|s-r|^(2H-2)`
/// for deterministic `φ`, by nested quadrature.
pub fn expected_square(model: &HurstModel, phi: &Profile, t: f64) -> Result<f64> {
    product_moment(model, phi, phi, t)
}

/// `∫_0^t [φ(s) M²(ψχ_[0,s])(s) + ψ(s) M²(φχ_[0,s])(s)] ds`, the covariance
/// `E[∫_0^t φ dB^H ∫_0^t ψ dB^H]` of two deterministic integrals.
pub fn product_moment(model: &HurstModel, phi: &Profile, psi: &Profile, t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(FwnError::Domain(format!(
            "time must be nonnegative, got {t}"
        )));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let c = model.m_squared_kernel_const() * model.path_scale().powi(2);
    let power = 2.0 * model.exponent();
    let inner_opts = QuadOptions {
        abs_tol: 1e-12,
        rel_tol: 1e-11,
        max_intervals: 4000,
    };
    let m2 = |f: &Profile, s: f64| -> f64 {
        let g = |r: f64| f.value(r);
        quad::integrate_singular(&g, s, 0.0, s, power, &f.breakpoints(), &inner_opts)
            .map(|e| c * e.value)
            .unwrap_or(f64::NAN)
    };
    let integrand = |s: f64| phi.value(s) * m2(psi, s) + psi.value(s) * m2(phi, s);
    let outer_opts = QuadOptions {
        abs_tol: DEFAULT_QUAD_TOL * 1e-2,
        rel_tol: 1e-10,
        max_intervals: 4000,
    };
    let mut breaks = phi.breakpoints();
    breaks.extend(psi.breakpoints());
    let est = quad::integrate_with_breaks(&integrand, 0.0, t, &breaks, &outer_opts)?;
    if !est.value.is_finite() {
        return Err(FwnError::Accuracy {
            estimate: est.value,
            tol: outer_opts.abs_tol,
            tail: 0.0,
        });
    }
    Ok(est.value)
}

/// Exact second moment of a discrete Wick–Riemann integral, split into the
/// product-rule part and the trace part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecondMoment {
    pub pathwise: f64,
    pub trace: f64,
    pub total: f64,
}

/// `E X²(t_k)` for `φ(t_i) = Σ_{j<i} h(t_j) ΔB_j`, `k = upto` nodes, on an
/// M-synthesis driver. `O(steps²)` time and memory.
pub fn second_moment_first_chaos(
    model: &HurstModel,
    kernel: &Profile,
    grid: &TimeGrid,
    upto: usize,
) -> Result<SecondMoment> {
    let m = grid.steps();
    if upto > m {
        return Err(FwnError::Domain(format!(
            "node {upto} beyond grid of {m} steps"
        )));
    }
    let times = grid.times();
    let dt = grid.dt();
    let h: Vec<f64> = times[..m].iter().map(|&t| kernel.value(t)).collect();
    let scale2 = model.path_scale().powi(2);
    let gamma: Vec<f64> = (0..m).map(|k| scale2 * fgn_autocov(model, dt, k)).collect();
    // E φ_i² accumulated; E φ_i φ_j = E φ_min².
    let mut var_phi = vec![0.0; m];
    for i in 1..m {
        var_phi[i] = var_phi[i - 1] + h[i - 1] * h[i - 1] * dt;
    }
    let pathwise: f64 = (0..upto)
        .into_par_iter()
        .map(|i| {
            (0..upto)
                .map(|j| var_phi[i.min(j)] * gamma[i.abs_diff(j)])
                .sum::<f64>()
        })
        .collect::<Vec<_>>()
        .iter()
        .sum();
    // κ_ij = Σ_{l<i} h_l Cov(ΔB_l, ΔB^H_j), prefix sums over l.
    let cross = brownian_fractional_cross(model, grid);
    let mut kappa = vec![0.0; upto * upto];
    for i in 1..upto {
        let (prev, cur) = kappa.split_at_mut(i * upto);
        let prev = &prev[(i - 1) * upto..];
        let c = &cross[(i - 1) * m..(i - 1) * m + upto];
        for j in 0..upto {
            cur[j] = prev[j] + h[i - 1] * c[j];
        }
    }
    let trace: f64 = (0..upto)
        .map(|i| {
            (0..upto)
                .map(|j| kappa[i * upto + j] * kappa[j * upto + i])
                .sum::<f64>()
        })
        .sum();
    Ok(SecondMoment {
        pathwise,
        trace,
        total: pathwise + trace,
    })
}

/// Quadratic form `x' R x` with the fGn covariance `R`, by circulant
/// embedding, for per-path Monte-Carlo evaluation of the product-rule term.
pub struct FgnQuadraticForm {
    m: usize,
    spectrum: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl FgnQuadraticForm {
    pub fn new(model: &HurstModel, grid: &TimeGrid) -> Self {
        let m = grid.steps();
        let len = 2 * m;
        let scale2 = model.path_scale().powi(2);
        let mut spectrum: Vec<Complex<f64>> = (0..len)
            .map(|k| {
                let lag = if k <= m { k } else { len - k };
                let g = if lag == m {
                    0.0
                } else {
                    fgn_autocov(model, grid.dt(), lag)
                };
                Complex::new(scale2 * g, 0.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(len);
        let inv = planner.plan_fft_inverse(len);
        fwd.process(&mut spectrum);
        Self {
            m,
            spectrum,
            fwd,
            inv,
        }
    }

    /// `Σ_{i,j<upto} x_i x_j R_ij`.
    pub fn eval(&self, x: &[f64], upto: usize) -> f64 {
        let len = 2 * self.m;
        let mut buf = vec![Complex::new(0.0, 0.0); len];
        for (b, v) in buf.iter_mut().zip(&x[..upto]) {
            b.re = *v;
        }
        self.fwd.process(&mut buf);
        for (b, s) in buf.iter_mut().zip(&self.spectrum) {
            *b *= s;
        }
        self.inv.process(&mut buf);
        let norm = 1.0 / len as f64;
        x[..upto]
            .iter()
            .zip(&buf)
            .map(|(v, y)| v * y.re * norm)
            .sum()
    }
}

/// Per-path `Σ_ij φ_i φ_j R_ij` up to node `upto`; its mean is the
/// product-rule part of `E X²(t_upto)` for any adapted integrand.
pub fn pathwise_double_sums(
    model: &HurstModel,
    phi: &Integrand,
    grid: &TimeGrid,
    upto: usize,
) -> Vec<f64> {
    let form = FgnQuadraticForm::new(model, grid);
    (0..phi.n_paths())
        .into_par_iter()
        .map(|p| form.eval(phi.path(p), upto))
        .collect()
}

/// Outcome of comparing an estimated `E X²(t)` against the L² bound
/// `K(H) E ∫_0^t φ² t^(2H-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `lhs / (K(H)/2 · E ∫ φ² · t^(2H-1))`, recorded for nonnegative `φ`.
    pub tight_ratio: Option<f64>,
    pub pass: bool,
}

/// `pass ⇔ lhs ≤ rhs (1 + 3 se/lhs)`.
pub fn bound_check(
    model: &HurstModel,
    lhs: MeanEstimate,
    mean_square_integral: f64,
    t: f64,
    nonnegative: bool,
) -> BoundRecord {
    let growth = t.powf(2.0 * model.hurst() - 1.0) * model.path_scale().powi(2);
    let rhs = model.k_h() * mean_square_integral * growth;
    let rel = if lhs.mean > 0.0 {
        lhs.std_error / lhs.mean
    } else {
        0.0
    };
    let ratio = if rhs > 0.0 { lhs.mean / rhs } else { 0.0 };
    BoundRecord {
        lhs: lhs.mean,
        lhs_se: lhs.std_error,
        rhs,
        ratio,
        tight_ratio: nonnegative.then_some(2.0 * ratio),
        pass: lhs.mean <= rhs * (1.0 + 3.0 * rel),
    }
}

/// Bound check with the exact product-rule value as left side.
pub fn bound_check_deterministic(
    model: &HurstModel,
    phi: &Profile,
    t: f64,
    nonnegative: bool,
) -> Result<BoundRecord> {
    let lhs = expected_square(model, phi, t)?;
    let opts = QuadOptions::default().with_abs_tol(1e-13);
    let msi = quad::integrate(&|s: f64| phi.value(s).powi(2), 0.0, t, &opts)?.value;
    Ok(bound_check(
        model,
        MeanEstimate {
            mean: lhs,
            std_error: 0.0,
            n: 0,
        },
        msi,
        t,
        nonnegative,
    ))
}

/// Monte-Carlo `E X²(t)` against the quadrature value
/// `∫_0^t 2σ(s) M²(σχ_[0,s])(s) ds`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ItoSquareRecord {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub pass: bool,
}

pub fn ito_square_check(
    model: &HurstModel,
    sigma: &Profile,
    t: f64,
    monte_carlo: MeanEstimate,
) -> Result<ItoSquareRecord> {
    let rhs = expected_square(model, sigma, t)?;
    Ok(ItoSquareRecord {
        lhs: monte_carlo.mean,
        lhs_se: monte_carlo.std_error,
        rhs,
        pass: (monte_carlo.mean - rhs).abs() <= 4.0 * monte_carlo.std_error,
    })
}

/// `dX = a(t)dt + b(t)dB^H`, `X(0) = x0`, with deterministic `a`, `b`.
#[derive(Debug, Clone)]
pub struct FractionalWisProcess {
    pub initial: f64,
    pub drift: Profile,
    pub diffusion: Profile,
}

impl FractionalWisProcess {
    /// `x0 + ∫_0^t a`.
    pub fn mean(&self, t: f64) -> Result<f64> {
        let opts = QuadOptions::default().with_abs_tol(1e-13);
        Ok(self.initial + quad::integrate(&|s: f64| self.drift.value(s), 0.0, t, &opts)?.value)
    }
}

/// Product rule for `E[X_1(t) X_2(t)]`:
/// `x_1 x_2 + ∫_0^t (E X_1 a_2 + E X_2 a_1) ds + ∫_0^t (b_1 M²(b_2χ) + b_2 M²(b_1χ)) ds`.
pub fn product_rule_moment(
    model: &HurstModel,
    x1: &FractionalWisProcess,
    x2: &FractionalWisProcess,
    t: f64,
) -> Result<f64> {
    let opts = QuadOptions::default().with_abs_tol(1e-12);
    let drift_part = |s: f64| {
        let m1 = x1.mean(s).unwrap_or(f64::NAN);
        let m2 = x2.mean(s).unwrap_or(f64::NAN);
        m1 * x2.drift.value(s) + m2 * x1.drift.value(s)
    };
    let drift = quad::integrate(&drift_part, 0.0, t, &opts)?.value;
    let noise = product_moment(model, &x1.diffusion, &x2.diffusion, t)?;
    Ok(x1.initial * x2.initial + drift + noise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbmgen::{GeneratorMethod, Sampler};

    fn setup(n: usize, paths: usize) -> (HurstModel, DriverEnsemble) {
        let model = HurstModel::new(0.75).unwrap();
        let grid = TimeGrid::new(1.0, n).unwrap();
        let s = Sampler::new(&model, grid, GeneratorMethod::MSynthesis).unwrap();
        (model.clone(), s.sample(17, 0..paths as u64, false))
    }

    #[test]
    fn expected_square_of_constant_is_variance() {
        let m = HurstModel::new(0.75).unwrap();
        let v = expected_square(&m, &Profile::new(|_| 1.0), 1.0).unwrap();
        assert!((v - 2.0 * m.c_h()).abs() < 1e-8, "{v}");
        let v2 = expected_square(&m, &Profile::new(|_| 1.0), 2.0).unwrap();
        assert!((v2 - m.variance(2.0)).abs() < 1e-8);
        assert_eq!(
            expected_square(&m, &Profile::new(|_| 0.0), 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn product_moment_of_indicators_is_covariance() {
        let m = HurstModel::new(0.75).unwrap();
        let one = Profile::new(|_| 1.0);
        let half = Profile::indicator(0.0, 0.5);
        let v = product_moment(&m, &one, &half, 1.0).unwrap();
        assert!((v - m.c_h()).abs() < 1e-7, "{v} vs {}", m.c_h());
    }

    #[test]
    fn wiener_route_reproduces_driver_for_unit_integrand() {
        let (m, d) = setup(65, 4);
        let phi = Integrand::deterministic(Profile::new(|_| 1.0), &d.grid, d.n_paths);
        let x = wiener_integral(&m, &phi, &d).unwrap();
        for p in 0..4 {
            for (a, b) in x.path(p).iter().zip(d.bh(p)) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(
                (x.terminal[p] - d.bh(p)[64]).abs() < 1e-8,
                "{} {}",
                x.terminal[p],
                d.bh(p)[64]
            );
        }
    }

    #[test]
    fn zero_kernel_gives_zero_integral() {
        let (m, d) = setup(33, 3);
        let phi = Integrand::first_chaos(Profile::new(|_| 0.0), &d).unwrap();
        let x = wick_riemann_integral(&m, &phi, &d).unwrap();
        assert!(x.running.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn first_chaos_values_are_brownian_for_unit_kernel() {
        let (_, d) = setup(33, 2);
        let phi = Integrand::first_chaos(Profile::new(|_| 1.0), &d).unwrap();
        for p in 0..2 {
            for (a, b) in phi.path(p).iter().zip(d.b(p).unwrap()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pathwise_adapted_is_rejected_by_exact_wick() {
        let (m, d) = setup(17, 2);
        let phi = Integrand::pathwise_adapted(&d, |_, _, bh| bh.last().unwrap().powi(2));
        assert!(matches!(
            wick_riemann_integral(&m, &phi, &d),
            Err(FwnError::Contract(_))
        ));
        let x = wick_riemann_adapted(&phi, &d).unwrap();
        assert!(x.approximate);
    }

    #[test]
    fn pathwise_adapted_values_ignore_the_future() {
        let (_, d) = setup(17, 1);
        let f = |_: usize, _: Option<&[f64]>, bh: &[f64]| bh.iter().sum::<f64>();
        let phi = Integrand::pathwise_adapted(&d, f);
        let mut shuffled = d.clone();
        for v in shuffled.paths_bh[9..].iter_mut() {
            *v = -*v * 3.0 + 1.0;
        }
        let psi = Integrand::pathwise_adapted(&shuffled, f);
        assert_eq!(&phi.path(0)[..9], &psi.path(0)[..9]);
    }

    #[test]
    fn uncoupled_driver_is_rejected() {
        let m = HurstModel::new(0.75).unwrap();
        let grid = TimeGrid::new(1.0, 17).unwrap();
        let d = crate::fbmgen::generate_circulant(&m, grid, 2, 1).unwrap();
        let phi = Integrand::deterministic(Profile::new(|_| 1.0), &grid, 2);
        assert!(matches!(
            wiener_integral(&m, &phi, &d),
            Err(FwnError::Config(_))
        ));
    }

    #[test]
    fn wiener_route_is_linear() {
        let (m, d) = setup(33, 3);
        let f = Integrand::deterministic(Profile::new(|s| s), &d.grid, 3);
        let g = Integrand::deterministic(Profile::new(f64::cos), &d.grid, 3);
        let h = Integrand::deterministic(Profile::new(|s| 2.0 * s - 0.5 * s.cos()), &d.grid, 3);
        let (xf, xg, xh) = (
            wiener_integral(&m, &f, &d).unwrap(),
            wiener_integral(&m, &g, &d).unwrap(),
            wiener_integral(&m, &h, &d).unwrap(),
        );
        for p in 0..3 {
            let lin = 2.0 * xf.terminal[p] - 0.5 * xg.terminal[p];
            assert!((xh.terminal[p] - lin).abs() < 1e-8);
            for i in 0..33 {
                let lin = 2.0 * xf.path(p)[i] - 0.5 * xg.path(p)[i];
                assert!((xh.path(p)[i] - lin).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn discrete_second_moment_reduces_to_deterministic_case() {
        // h ≡ 0 gives zero; the pathwise term of a unit kernel is positive and
        // the trace term positive as well.
        let m = HurstModel::new(0.75).unwrap();
        let grid = TimeGrid::new(1.0, 65).unwrap();
        let z = second_moment_first_chaos(&m, &Profile::new(|_| 0.0), &grid, 64).unwrap();
        assert_eq!(z.total, 0.0);
        let s = second_moment_first_chaos(&m, &Profile::new(|_| 1.0), &grid, 64).unwrap();
        assert!(s.pathwise > 0.0 && s.trace > 0.0);
    }

    #[test]
    fn quadratic_form_matches_direct_sum() {
        let m = HurstModel::new(0.75).unwrap();
        let grid = TimeGrid::new(1.0, 33).unwrap();
        let form = FgnQuadraticForm::new(&m, &grid);
        let x: Vec<f64> = (0..33).map(|i| (i as f64 * 0.37).sin()).collect();
        let direct: f64 = (0..20)
            .flat_map(|i| (0..20).map(move |j| (i, j)))
            .map(|(i, j)| x[i] * x[j] * fgn_autocov(&m, grid.dt(), i.abs_diff(j)))
            .sum();
        assert!((form.eval(&x, 20) - direct).abs() < 1e-13);
    }

    #[test]
    fn bound_check_examples() {
        let m = HurstModel::new(0.75).unwrap();
        let r = bound_check_deterministic(&m, &Profile::new(|_| 1.0), 1.0, true).unwrap();
        assert!((r.lhs - 0.29854).abs() < 1e-4);
        assert!((r.rhs - 1.965_207_684_777_857).abs() < 1e-9);
        assert!(r.pass);
        let z = bound_check_deterministic(&m, &Profile::new(|_| 0.0), 1.0, true).unwrap();
        assert_eq!((z.lhs, z.rhs), (0.0, 0.0));
        assert!(z.pass);
    }

    #[test]
    fn corpus_mean_square_integrals() {
        assert!((CorpusIntegrand::Brownian.mean_square_integral(1.0).unwrap() - 0.5).abs() < 1e-12);
        let e = CorpusIntegrand::ExpKernel
            .mean_square_integral(1.0)
            .unwrap();
        // ∫_0^1 (1 - e^{-2s})/2 ds
        let exact = 0.5 - (1.0 - (-2.0f64).exp()) / 4.0;
        assert!((e - exact).abs() < 1e-12);
        assert_eq!(
            "const:2.5".parse::<CorpusIntegrand>().unwrap(),
            CorpusIntegrand::Const(2.5)
        );
        assert!("nope".parse::<CorpusIntegrand>().is_err());
    }

    #[test]
    fn product_rule_with_drifts() {
        let m = HurstModel::new(0.75).unwrap();
        let x1 = FractionalWisProcess {
            initial: 1.0,
            drift: Profile::new(|_| 2.0),
            diffusion: Profile::new(|_| 1.0),
        };
        let x2 = FractionalWisProcess {
            initial: -0.5,
            drift: Profile::new(|_| 0.0),
            diffusion: Profile::new(|_| 1.0),
        };
        let v = product_rule_moment(&m, &x1, &x2, 1.0).unwrap();
        // (1 + 2)(-0.5) + 2 c_h
        assert!((v - (-1.5 + 2.0 * m.c_h())).abs() < 1e-8);
    }
}
