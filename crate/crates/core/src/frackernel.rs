//! The operator M for `1/2 < H < 1`: normalizing constants, the closed form
//! of `M(χ_[0,t])`, kernel (quadrature) and Fourier-multiplier realizations,
//! and the H-inner product.
//!
//! Normalization. The kernel form `Mf(x) = κ ∫ |y|^(H-3/2) f(x+y) dy` and the
//! multiplier form `λ |ω|^(1/2-H)` are tied by `λ = κ / c_h`. The constant
//! `κ = m_prefactor · (H - 1/2)` is fixed by calibrating `M(χ_[0,t])` against
//! the variance law `‖M χ_[0,t]‖² = 2 c_h t^(2H)` (see [`calibrate_prefactor`]).

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{FwnError, Result};
use crate::quad::{self, QuadOptions};

/// Default absolute tolerance for kernel quadratures.
pub const DEFAULT_QUAD_TOL: f64 = 1e-8;
/// Default truncation `R = 20 T` of the kernel integrals.
pub const DEFAULT_TRUNCATION_FACTOR: f64 = 20.0;
/// Relative tolerance of the calibration gate.
pub const CALIBRATION_GATE_TOL: f64 = 5e-3;
/// Horizons at which the calibration gate is evaluated.
pub const CALIBRATION_TIMES: [f64; 3] = [0.5, 1.0, 2.0];

fn check_hurst(hurst: f64) -> Result<()> {
    if hurst.is_finite() && hurst > 0.5 && hurst < 1.0 {
        Ok(())
    } else {
        Err(FwnError::Domain(format!(
            "Hurst parameter must lie in (1/2, 1), got {hurst}"
        )))
    }
}

/// `C_H = [2 Γ(H - 1/2) cos(π (H - 1/2) / 2)]^-1`.
pub fn c_h(hurst: f64) -> Result<f64> {
    check_hurst(hurst)?;
    let a = hurst - 0.5;
    Ok(1.0 / (2.0 * gamma(a) * (0.5 * PI * a).cos()))
}

/// `K(H) = 4 C_H² (π 5^(2H-1) / (2H-1) + 2 / (1-H))`.
pub fn k_h(hurst: f64) -> Result<f64> {
    let c = c_h(hurst)?;
    Ok(k_h_from_c_h(hurst, c))
}

fn k_h_from_c_h(hurst: f64, c: f64) -> f64 {
    4.0 * c * c * (PI * 5f64.powf(2.0 * hurst - 1.0) / (2.0 * hurst - 1.0) + 2.0 / (1.0 - hurst))
}

/// `sgn(t-x)|t-x|^a + sgn(x)|x|^a`, evaluated without cancellation far from
/// `[0, t]`.
fn indicator_profile(a: f64, t: f64, x: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    if x < 0.0 {
        let ax = -x;
        if ax > t {
            ax.powf(a) * (a * (t / ax).ln_1p()).exp_m1()
        } else {
            (t + ax).powf(a) - ax.powf(a)
        }
    } else if x > t {
        if x > 2.0 * t {
            -x.powf(a) * (a * (-t / x).ln_1p()).exp_m1()
        } else {
            x.powf(a) - (x - t).powf(a)
        }
    } else {
        (t - x).powf(a) + x.powf(a)
    }
}

/// `∫ g_t(x)² dx` over the real line for the unit-prefactor profile.
pub fn indicator_profile_square_integral(hurst: f64, t: f64) -> Result<f64> {
    check_hurst(hurst)?;
    if t <= 0.0 {
        return Ok(0.0);
    }
    let a = hurst - 0.5;
    let opts = QuadOptions {
        abs_tol: 1e-14,
        rel_tol: 1e-13,
        max_intervals: 4000,
    };
    let sq = |x: f64| indicator_profile(a, t, x).powi(2);
    let middle = quad::integrate_with_breaks(&sq, -t, 2.0 * t, &[0.0, t], &opts)?;
    let decay = 2.0 - 2.0 * a;
    let left = quad::integrate_tail(&|y: f64| sq(-y), t, decay, &opts)?;
    let right = quad::integrate_tail(&sq, 2.0 * t, decay, &opts)?;
    Ok(middle.value + left.value + right.value)
}

/// Candidate prefactors for the closed form of `M(χ_[0,t])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefactorChoice {
    /// `1 / C_H`.
    Reciprocal,
    /// `C_H / (H - 1/2)`, from integrating the kernel form directly.
    Antiderivative,
    /// One-parameter least-squares fit to the variance law.
    LeastSquares,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrefactorCandidate {
    pub choice: PrefactorChoice,
    pub value: f64,
    /// Largest relative gate error over [`CALIBRATION_TIMES`].
    pub max_gate_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatePoint {
    pub t: f64,
    pub integral: f64,
    pub target: f64,
    pub rel_error: f64,
}

/// Outcome of the prefactor calibration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub candidates: Vec<PrefactorCandidate>,
    pub chosen: PrefactorChoice,
    pub prefactor: f64,
    pub gate: Vec<GatePoint>,
}

impl Calibration {
    pub fn passes(&self) -> bool {
        self.gate
            .iter()
            .all(|g| g.rel_error <= CALIBRATION_GATE_TOL)
    }
}

/// Picks the prefactor of `M(χ_[0,t])`: each closed-form candidate is
/// run through the gate `∫ M_t² = 2 c_h t^(2H)`; the first one that passes
/// is adopted, otherwise the least-squares value over the gate horizons.
pub fn calibrate_prefactor(hurst: f64) -> Result<Calibration> {
    let c = c_h(hurst)?;
    let a = hurst - 0.5;
    let integrals: Vec<f64> = CALIBRATION_TIMES
        .iter()
        .map(|&t| indicator_profile_square_integral(hurst, t))
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = CALIBRATION_TIMES
        .iter()
        .map(|&t| 2.0 * c * t.powf(2.0 * hurst))
        .collect();
    let gate_for = |p: f64| -> Vec<GatePoint> {
        CALIBRATION_TIMES
            .iter()
            .zip(integrals.iter().zip(&targets))
            .map(|(&t, (&i, &y))| GatePoint {
                t,
                integral: p * p * i,
                target: y,
                rel_error: ((p * p * i - y) / y).abs(),
            })
            .collect()
    };
    let worst = |g: &[GatePoint]| g.iter().map(|p| p.rel_error).fold(0.0, f64::max);

    let mut candidates = Vec::new();
    for (choice, value) in [
        (PrefactorChoice::Reciprocal, 1.0 / c),
        (PrefactorChoice::Antiderivative, c / a),
    ] {
        let g = gate_for(value);
        candidates.push(PrefactorCandidate {
            choice,
            value,
            max_gate_error: worst(&g),
        });
    }
    if let Some(hit) = candidates
        .iter()
        .find(|c| c.max_gate_error <= CALIBRATION_GATE_TOL)
    {
        let (choice, prefactor) = (hit.choice, hit.value);
        return Ok(Calibration {
            gate: gate_for(prefactor),
            candidates,
            chosen: choice,
            prefactor,
        });
    }
    let num: f64 = integrals.iter().zip(&targets).map(|(i, y)| i * y).sum();
    let den: f64 = integrals.iter().map(|i| i * i).sum();
    let prefactor = (num / den).sqrt();
    let gate = gate_for(prefactor);
    candidates.push(PrefactorCandidate {
        choice: PrefactorChoice::LeastSquares,
        value: prefactor,
        max_gate_error: worst(&gate),
    });
    Ok(Calibration {
        candidates,
        chosen: PrefactorChoice::LeastSquares,
        prefactor,
        gate,
    })
}

/// Path normalization of generated fBm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `Var B^H(t) = 2 c_h t^(2H)`.
    #[default]
    Native,
    /// `Var B^H(t) = t^(2H)`.
    UnitVariance,
}

/// The Hurst parameter with every constant derived from it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HurstModel {
    hurst: f64,
    c_h: f64,
    k_h: f64,
    m_prefactor: f64,
    normalization: Normalization,
    calibration: Calibration,
}

impl HurstModel {
    pub fn new(hurst: f64) -> Result<Self> {
        let c = c_h(hurst)?;
        let calibration = calibrate_prefactor(hurst)?;
        Ok(Self {
            hurst,
            c_h: c,
            k_h: k_h_from_c_h(hurst, c),
            m_prefactor: calibration.prefactor,
            normalization: Normalization::Native,
            calibration,
        })
    }

    pub fn with_normalization(mut self, normalization: Normalization) -> Self {
        self.normalization = normalization;
        self
    }

    pub fn hurst(&self) -> f64 {
        self.hurst
    }
    pub fn c_h(&self) -> f64 {
        self.c_h
    }
    pub fn k_h(&self) -> f64 {
        self.k_h
    }
    pub fn m_prefactor(&self) -> f64 {
        self.m_prefactor
    }
    pub fn normalization(&self) -> Normalization {
        self.normalization
    }
    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    /// `H - 1/2`.
    pub fn exponent(&self) -> f64 {
        self.hurst - 0.5
    }

    /// Constant `κ` in front of the kernel `|y|^(H-3/2)`.
    pub fn kernel_const(&self) -> f64 {
        self.m_prefactor * self.exponent()
    }

    /// Scale `λ` of the Fourier symbol `λ |ω|^(1/2-H)`.
    pub fn multiplier_scale(&self) -> f64 {
        self.kernel_const() / self.c_h
    }

    /// Constant of the reduced M² kernel `|r|^(2H-2)`:
    /// `κ² (B(a,a) + 2 B(a, 1-2a))`, from collapsing the double kernel.
    pub fn m_squared_kernel_const(&self) -> f64 {
        let a = self.exponent();
        let k = self.kernel_const();
        k * k * (beta(a, a) + 2.0 * beta(a, 1.0 - 2.0 * a))
    }

    /// `E[B^H(s) B^H(t)] = c_h (|s|^(2H) + |t|^(2H) - |t-s|^(2H))`.
    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        let e = 2.0 * self.hurst;
        self.c_h * (s.abs().powf(e) + t.abs().powf(e) - (t - s).abs().powf(e))
    }

    pub fn variance(&self, t: f64) -> f64 {
        self.covariance(t, t)
    }

    /// Factor applied to generated fBm paths.
    pub fn path_scale(&self) -> f64 {
        match self.normalization {
            Normalization::Native => 1.0,
            Normalization::UnitVariance => (2.0 * self.c_h).sqrt().recip(),
        }
    }
}

/// `M_t(x) = M(χ_[0,t])(x) = p (sgn(t-x)|t-x|^(H-1/2) + sgn(x)|x|^(H-1/2))`.
pub fn m_indicator(model: &HurstModel, t: f64, x: f64) -> f64 {
    model.m_prefactor * indicator_profile(model.exponent(), t, x)
}

/// `∫_0^x M_t(s) ds` in closed form.
pub fn m_indicator_antiderivative(model: &HurstModel, t: f64, x: f64) -> f64 {
    let b = model.exponent() + 1.0;
    model.m_prefactor / b * (x.abs().powf(b) - (t - x).abs().powf(b) + t.abs().powf(b))
}

/// `∫_lo^hi M_t(s) ds`.
pub fn m_indicator_cell_integral(model: &HurstModel, t: f64, lo: f64, hi: f64) -> f64 {
    if t == 0.0 {
        return 0.0;
    }
    let b = model.exponent() + 1.0;
    let pw = |x: f64| x.abs().powf(b);
    model.m_prefactor / b * ((pw(hi) - pw(lo)) - (pw(t - hi) - pw(t - lo)))
}

/// A real function on the line, with the hints kernel quadrature needs.
pub trait RealFunction: Sync {
    fn value(&self, x: f64) -> f64;
    /// Interval outside which the function vanishes.
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
    /// Points of discontinuity inside the support.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A closure-backed [`RealFunction`].
#[derive(Clone)]
pub struct Profile {
    f: ScalarFn,
    support: (f64, f64),
    breaks: Vec<f64>,
}

impl std::fmt::Debug for Profile {
    fn fmt(&self, fmt: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fmt.debug_struct("Profile")
            .field("support", &self.support)
            .field("breaks", &self.breaks)
            .finish()
    }
}

impl Profile {
    pub fn new<F: Fn(f64) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        Self {
            f: Arc::new(f),
            support: (f64::NEG_INFINITY, f64::INFINITY),
            breaks: Vec::new(),
        }
    }

    pub fn with_support(mut self, lo: f64, hi: f64) -> Self {
        self.support = (lo, hi);
        self
    }

    pub fn with_breaks(mut self, breaks: &[f64]) -> Self {
        self.breaks = breaks.to_vec();
        self
    }

    /// `χ_[lo,hi]`.
    pub fn indicator(lo: f64, hi: f64) -> Self {
        Self::new(move |x| if x >= lo && x <= hi { 1.0 } else { 0.0 }).with_support(lo, hi)
    }

    /// `g(x) χ_[lo,hi](x)`.
    pub fn windowed<F: Fn(f64) -> f64 + Send + Sync + 'static>(g: F, lo: f64, hi: f64) -> Self {
        Self::new(move |x| if x >= lo && x <= hi { g(x) } else { 0.0 }).with_support(lo, hi)
    }

    /// `exp(-(x - centre)²)`, truncated where it drops below 1e-40.
    pub fn gaussian(centre: f64) -> Self {
        Self::new(move |x| (-(x - centre).powi(2)).exp()).with_support(centre - 9.6, centre + 9.6)
    }
}

impl RealFunction for Profile {
    fn value(&self, x: f64) -> f64 {
        if x < self.support.0 || x > self.support.1 {
            0.0
        } else {
            (self.f)(x)
        }
    }
    fn support(&self) -> (f64, f64) {
        self.support
    }
    fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.breaks.clone();
        for s in [self.support.0, self.support.1] {
            if s.is_finite() {
                b.push(s);
            }
        }
        b
    }
}

/// Uniform grid `start + i step`, `i < len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Result<Self> {
        if len < 2 || !(step > 0.0) || !start.is_finite() {
            return Err(FwnError::Config(format!(
                "grid needs >= 2 nodes and a positive step (len {len}, step {step})"
            )));
        }
        Ok(Self { start, step, len })
    }

    /// `len` nodes on `[-half_width, half_width)`, spacing `2 half_width / len`.
    pub fn symmetric(half_width: f64, len: usize) -> Result<Self> {
        Self::new(-half_width, 2.0 * half_width / len as f64, len)
    }

    pub fn node(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.node(self.len - 1)
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len).map(|i| self.node(i))
    }
}

/// Sampled function on a [`UniformGrid`]; linear between nodes, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: UniformGrid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: UniformGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len {
            return Err(FwnError::Config(format!(
                "{} values for a grid of {} nodes",
                values.len(),
                grid.len
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FwnError::Domain(format!("non-finite value at node {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn sample<F: Fn(f64) -> f64>(grid: UniformGrid, f: F) -> Result<Self> {
        let values = grid.nodes().map(f).collect();
        Self::new(grid, values)
    }

    pub fn zeros(grid: UniformGrid) -> Self {
        Self {
            grid,
            values: vec![0.0; grid.len],
        }
    }

    pub fn scaled_sum(&self, a: f64, other: &GridFunction, b: f64) -> Result<GridFunction> {
        if self.grid != other.grid {
            return Err(FwnError::Config("grid mismatch".into()));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        GridFunction::new(self.grid, values)
    }

    /// Nearest node to `x`.
    pub fn index_of(&self, x: f64) -> usize {
        (((x - self.grid.start) / self.grid.step).round().max(0.0) as usize).min(self.grid.len - 1)
    }

    /// Trapezoid rule over the grid.
    pub fn trapezoid(&self) -> f64 {
        let v = &self.values;
        let inner: f64 = crate::stats::pairwise_sum(&v[1..v.len() - 1]);
        self.grid.step * (inner + 0.5 * (v[0] + v[v.len() - 1]))
    }

    /// Two-column CSV `node,value`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "node,value")?;
        for (x, v) in self.grid.nodes().zip(&self.values) {
            writeln!(w, "{x:?},{v:?}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.and_then(|s| s.trim().parse().ok()).ok_or_else(|| {
                    FwnError::Config(format!("malformed grid CSV row {}", lineno + 1))
                })
            };
            xs.push(parse(parts.next())?);
            vs.push(parse(parts.next())?);
        }
        if xs.len() < 2 {
            return Err(FwnError::Config("grid CSV needs at least two rows".into()));
        }
        let step = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
        let grid = UniformGrid::new(xs[0], step, xs.len())?;
        GridFunction::new(grid, vs)
    }
}

impl RealFunction for GridFunction {
    fn value(&self, x: f64) -> f64 {
        let pos = (x - self.grid.start) / self.grid.step;
        if pos < 0.0 || pos > (self.grid.len - 1) as f64 {
            return 0.0;
        }
        let i = (pos.floor() as usize).min(self.grid.len - 2);
        let frac = pos - i as f64;
        self.values[i] * (1.0 - frac) + self.values[i + 1] * frac
    }
    fn support(&self) -> (f64, f64) {
        (self.grid.start, self.grid.end())
    }
    fn breakpoints(&self) -> Vec<f64> {
        vec![self.grid.start, self.grid.end()]
    }
}

/// Options for the kernel (quadrature) realization of M.
#[derive(Debug, Clone, Copy)]
pub struct KernelOptions {
    /// Truncation radius `R`: only `|y| <= R` enters the kernel integral.
    pub truncation: f64,
    /// Absolute tolerance on the returned value.
    pub tol: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            truncation: f64::INFINITY,
            tol: DEFAULT_QUAD_TOL,
        }
    }
}

impl KernelOptions {
    /// `R = 20 T` for a horizon `T`.
    pub fn for_horizon(horizon: f64) -> Self {
        Self {
            truncation: DEFAULT_TRUNCATION_FACTOR * horizon,
            ..Self::default()
        }
    }
}

fn singular_apply(
    f: &dyn RealFunction,
    x: f64,
    power: f64,
    scale: f64,
    opts: &KernelOptions,
) -> Result<f64> {
    let (s_lo, s_hi) = f.support();
    let lo = s_lo.max(x - opts.truncation);
    let hi = s_hi.min(x + opts.truncation);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(FwnError::Config(
            "kernel quadrature needs a finite support or truncation radius".into(),
        ));
    }
    if lo >= hi {
        return Ok(0.0);
    }
    let qopts = QuadOptions {
        abs_tol: opts.tol / scale.abs().max(f64::MIN_POSITIVE),
        rel_tol: 0.0,
        max_intervals: 4000,
    };
    let g = |u: f64| f.value(u);
    match quad::integrate_singular(&g, x, lo, hi, power, &f.breakpoints(), &qopts) {
        Ok(est) => Ok(scale * est.value),
        Err(FwnError::Accuracy { estimate, tol, .. }) => {
            // Leakage past the truncation window, from the boundary values.
            let edge = f
                .value(x - opts.truncation)
                .abs()
                .max(f.value(x + opts.truncation).abs());
            let tail = if opts.truncation.is_finite() {
                scale.abs() * edge * opts.truncation.powf(power) / power
            } else {
                0.0
            };
            Err(FwnError::Accuracy {
                estimate: estimate * scale.abs(),
                tol: tol * scale.abs(),
                tail,
            })
        }
        Err(e) => Err(e),
    }
}

/// `Mf(x) = κ ∫_{-R}^{R} f(x+y) |y|^(H-3/2) dy` by singularity-removing
/// quadrature.
pub fn apply_m_quadrature(
    model: &HurstModel,
    f: &dyn RealFunction,
    x: f64,
    opts: &KernelOptions,
) -> Result<f64> {
    singular_apply(f, x, model.exponent(), model.kernel_const(), opts)
}

/// `M²f(x)` through the reduced kernel `c ∫ f(x+r) |r|^(2H-2) dr`.
pub fn apply_m_squared_quadrature(
    model: &HurstModel,
    f: &dyn RealFunction,
    x: f64,
    opts: &KernelOptions,
) -> Result<f64> {
    singular_apply(
        f,
        x,
        2.0 * model.exponent(),
        model.m_squared_kernel_const(),
        opts,
    )
}

/// `M²f(x) = κ² ∬ |yz|^(H-3/2) f(x+y+z) dy dz`, evaluated as the nested
/// kernel integral `κ ∫ |w-x|^(H-3/2) Mf(w) dw` over the whole line.
pub fn apply_m_squared_double_kernel(
    model: &HurstModel,
    f: &dyn RealFunction,
    x: f64,
    tol: f64,
) -> Result<f64> {
    let (s_lo, s_hi) = f.support();
    if !(s_lo.is_finite() && s_hi.is_finite()) {
        return Err(FwnError::Config(
            "double-kernel M² needs a compactly supported function".into(),
        ));
    }
    let a = model.exponent();
    let kappa = model.kernel_const();
    let inner_opts = KernelOptions {
        truncation: f64::INFINITY,
        tol: tol * 1e-2,
    };
    // Away from the support the kernel integral is smooth; a relative
    // tolerance there keeps the tail map from amplifying absolute errors.
    let far_opts = QuadOptions {
        abs_tol: 0.0,
        rel_tol: 1e-12,
        max_intervals: 4000,
    };
    let mf = |w: f64| {
        if w > s_lo - 0.5 && w < s_hi + 0.5 {
            apply_m_quadrature(model, f, w, &inner_opts).unwrap_or(f64::NAN)
        } else {
            let g = |y: f64| f.value(y) * (w - y).abs().powf(a - 1.0);
            quad::integrate_with_breaks(&g, s_lo, s_hi, &f.breakpoints(), &far_opts)
                .map(|e| kappa * e.value)
                .unwrap_or(f64::NAN)
        }
    };
    let qopts = QuadOptions {
        abs_tol: tol / kappa,
        rel_tol: 0.0,
        max_intervals: 4000,
    };
    let lo = s_lo.min(x) - 1.0;
    let hi = s_hi.max(x) + 1.0;
    let mut breaks = f.breakpoints();
    breaks.retain(|b| *b > lo && *b < hi);
    let near = quad::integrate_singular(&mf, x, lo, hi, a, &breaks, &qopts)?;
    let weighted = |w: f64| (w - x).abs().powf(a - 1.0) * mf(w);
    let decay = 2.0 - 2.0 * a;
    let right = quad::integrate_tail(&weighted, hi, decay, &qopts)?;
    let left = quad::integrate_tail(&|y: f64| weighted(-y), -lo, decay, &qopts)?;
    let total = kappa * (near.value + right.value + left.value);
    if !total.is_finite() {
        return Err(FwnError::Accuracy {
            estimate: f64::INFINITY,
            tol,
            tail: 0.0,
        });
    }
    Ok(total)
}

/// Options for the Fourier-multiplier realization.
#[derive(Debug, Clone, Copy)]
pub struct FftOptions {
    /// The input is zero-padded to `pad_factor × len` points before the
    /// transform, which pushes the periodic images of the slowly decaying
    /// output away from the window.
    pub pad_factor: usize,
}

impl Default for FftOptions {
    fn default() -> Self {
        Self { pad_factor: 4 }
    }
}

/// Cell average of `|ω|^-e` over `[(|k| - 1/2) dω, (|k| + 1/2) dω]`; the
/// symbol is integrable at 0 for `e < 1`, so the zero-frequency cell keeps
/// its mass instead of being dropped.
fn symbol_cell_average(k: usize, d_omega: f64, e: f64) -> f64 {
    let q = 1.0 - e;
    if k == 0 {
        (0.5 * d_omega).powf(-e) / q
    } else {
        let lo = (k as f64 - 0.5) * d_omega;
        let hi = (k as f64 + 0.5) * d_omega;
        (hi.powf(q) - lo.powf(q)) / (q * d_omega)
    }
}

fn check_fft_grid(f: &GridFunction, opts: &FftOptions) -> Result<()> {
    if !f.grid.len.is_power_of_two() {
        return Err(FwnError::Config(format!(
            "FFT realization needs a power-of-two grid, got {} nodes",
            f.grid.len
        )));
    }
    if opts.pad_factor == 0 || !opts.pad_factor.is_power_of_two() {
        return Err(FwnError::Config(format!(
            "pad factor must be a power of two, got {}",
            opts.pad_factor
        )));
    }
    Ok(())
}

/// Forward transform of the zero-padded samples.
fn padded_spectrum(f: &GridFunction, pad: usize) -> (Vec<Complex<f64>>, usize) {
    let n = f.grid.len;
    let m = n * pad;
    let offset = (m - n) / 2;
    let mut buf = vec![Complex::new(0.0, 0.0); m];
    for (i, v) in f.values.iter().enumerate() {
        buf[offset + i] = Complex::new(*v, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(m).process(&mut buf);
    (buf, offset)
}

fn apply_symbol(
    f: &GridFunction,
    exponent: f64,
    scale: f64,
    opts: &FftOptions,
) -> Result<GridFunction> {
    check_fft_grid(f, opts)?;
    let n = f.grid.len;
    let m = n * opts.pad_factor;
    let (mut spec, offset) = padded_spectrum(f, opts.pad_factor);
    let d_omega = 2.0 * PI / (m as f64 * f.grid.step);
    for (i, c) in spec.iter_mut().enumerate() {
        let k = if i <= m / 2 { i } else { m - i };
        *c *= scale * symbol_cell_average(k, d_omega, exponent);
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_inverse(m).process(&mut spec);
    let inv = 1.0 / m as f64;
    let values = spec[offset..offset + n]
        .iter()
        .map(|c| c.re * inv)
        .collect();
    GridFunction::new(f.grid, values)
}

/// `Mf` as the inverse transform of `λ |ω|^(1/2-H) f̂`.
pub fn apply_m_fft(model: &HurstModel, f: &GridFunction) -> Result<GridFunction> {
    apply_m_fft_with(model, f, &FftOptions::default())
}

pub fn apply_m_fft_with(
    model: &HurstModel,
    f: &GridFunction,
    opts: &FftOptions,
) -> Result<GridFunction> {
    apply_symbol(f, model.exponent(), model.multiplier_scale(), opts)
}

/// `M²f` with symbol `λ² |ω|^(1-2H)`.
pub fn apply_m_squared(model: &HurstModel, f: &GridFunction) -> Result<GridFunction> {
    apply_m_squared_with(model, f, &FftOptions::default())
}

pub fn apply_m_squared_with(
    model: &HurstModel,
    f: &GridFunction,
    opts: &FftOptions,
) -> Result<GridFunction> {
    let s = model.multiplier_scale();
    apply_symbol(f, 2.0 * model.exponent(), s * s, opts)
}

/// `(f, g)_H = (Mf, Mg)_{L²}`.
///
/// Evaluated as the grid trapezoid of `f · M²g`, which by the adjointness
/// of M is the same quantity, written in spectral form so the result is
/// bitwise symmetric in `f` and `g`. Working through `M²` keeps the
/// integrand compactly supported instead of carrying the `|x|^(H-3/2)`
/// tails of `Mf` and `Mg`.
pub fn inner_product_h(model: &HurstModel, f: &GridFunction, g: &GridFunction) -> Result<f64> {
    if f.grid != g.grid {
        return Err(FwnError::Config("inner product needs a common grid".into()));
    }
    let opts = FftOptions::default();
    check_fft_grid(f, &opts)?;
    let m = f.grid.len * opts.pad_factor;
    let (fs, _) = padded_spectrum(f, opts.pad_factor);
    let (gs, _) = padded_spectrum(g, opts.pad_factor);
    let d_omega = 2.0 * PI / (m as f64 * f.grid.step);
    let s = model.multiplier_scale();
    let e = 2.0 * model.exponent();
    let terms: Vec<f64> = fs
        .iter()
        .zip(&gs)
        .enumerate()
        .map(|(i, (a, b))| {
            let k = if i <= m / 2 { i } else { m - i };
            s * s * symbol_cell_average(k, d_omega, e) * (a.re * b.re + a.im * b.im)
        })
        .collect();
    Ok(f.grid.step * crate::stats::pairwise_sum(&terms) / m as f64)
}
