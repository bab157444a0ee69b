//! Driver paths: Brownian motion `B` and fractional Brownian motion `B^H`
//! on a uniform time grid.
//!
//! Three generators share one output type:
//!
//! * Cholesky factorization of the increment covariance (exact, `O(n²)` per
//!   path, used as the reference law);
//! * circulant embedding of the same covariance (exact, `O(n log n)`);
//! * synthesis through the operator M, `B^H(t) = ∫ M_t(s) dB(s)`, which is
//!   the only generator that produces `B` and `B^H` from the same noise.
//!
//! Every path is drawn from its own keyed stream (see [`crate::rng`]), so an
//! ensemble, or any sub-range of it, is bit-identical however it is scheduled.

use std::io::{Read, Write};
use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{FwnError, Result};
use crate::frackernel::{self, HurstModel, DEFAULT_TRUNCATION_FACTOR};
use crate::quad::{self, QuadOptions};
use crate::rng::{Domain, PathStream};

/// Uniform grid on `[0, T]` with `2^k + 1` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    nodes: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, nodes: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(FwnError::Config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if nodes < 3 || !(nodes - 1).is_power_of_two() {
            return Err(FwnError::Config(format!(
                "node count must be a power of two plus one (>= 3), got {nodes}"
            )));
        }
        Ok(Self { horizon, nodes })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn nodes(&self) -> usize {
        self.nodes
    }
    pub fn steps(&self) -> usize {
        self.nodes - 1
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.steps() as f64
    }
    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps() {
            self.horizon
        } else {
            i as f64 * self.dt()
        }
    }
    pub fn times(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.time(i)).collect()
    }
    /// Index of the node nearest to `t`.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt()).round().max(0.0) as usize).min(self.steps())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorMethod {
    Cholesky,
    Circulant,
    MSynthesis,
}

impl GeneratorMethod {
    pub fn code(self) -> u8 {
        match self {
            GeneratorMethod::Cholesky => 0,
            GeneratorMethod::Circulant => 1,
            GeneratorMethod::MSynthesis => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(GeneratorMethod::Cholesky),
            1 => Ok(GeneratorMethod::Circulant),
            2 => Ok(GeneratorMethod::MSynthesis),
            c => Err(FwnError::Config(format!("unknown generator code {c}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GeneratorMethod::Cholesky => "cholesky",
            GeneratorMethod::Circulant => "circulant",
            GeneratorMethod::MSynthesis => "m_synthesis",
        }
    }
}

impl std::str::FromStr for GeneratorMethod {
    type Err = FwnError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cholesky" => Ok(GeneratorMethod::Cholesky),
            "circulant" => Ok(GeneratorMethod::Circulant),
            "m_synthesis" | "m" | "via_m" => Ok(GeneratorMethod::MSynthesis),
            other => Err(FwnError::Usage(format!(
                "unknown generator method '{other}'"
            ))),
        }
    }
}

/// Jointly sampled driver paths for the path indices `first_path..first_path + n_paths`.
#[derive(Debug, Clone)]
pub struct DriverEnsemble {
    pub grid: TimeGrid,
    pub hurst: f64,
    pub seed: u64,
    pub method: GeneratorMethod,
    pub first_path: u64,
    pub n_paths: usize,
    /// `B` and `B^H` were built from the same Gaussian noise.
    pub coupled: bool,
    /// Row-major `n_paths × nodes`; absent for uncoupled ensembles unless requested.
    pub paths_b: Option<Vec<f64>>,
    pub paths_bh: Vec<f64>,
    /// Standard normals driving the cells outside `[0, T]` (M synthesis only),
    /// `n_paths × far_width`.
    pub far_field: Option<Vec<f64>>,
    pub far_width: usize,
    /// Cell partition behind `far_field`.
    pub partition: Option<SpatialPartition>,
}

impl DriverEnsemble {
    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }

    pub fn bh(&self, p: usize) -> &[f64] {
        let n = self.nodes();
        &self.paths_bh[p * n..(p + 1) * n]
    }

    pub fn b(&self, p: usize) -> Option<&[f64]> {
        let n = self.nodes();
        self.paths_b.as_ref().map(|b| &b[p * n..(p + 1) * n])
    }

    pub fn far(&self, p: usize) -> Option<&[f64]> {
        let w = self.far_width;
        self.far_field.as_ref().map(|f| &f[p * w..(p + 1) * w])
    }

    /// `B(t_{i+1}) - B(t_i)`, or a configuration error when no Brownian path
    /// is attached.
    pub fn brownian_increments(&self, p: usize) -> Result<Vec<f64>> {
        let b = self
            .b(p)
            .ok_or_else(|| FwnError::Config("ensemble carries no Brownian increments".into()))?;
        Ok(b.windows(2).map(|w| w[1] - w[0]).collect())
    }

    pub fn fractional_increments(&self, p: usize) -> Vec<f64> {
        self.bh(p).windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Values of `B^H` at node `i` across all paths.
    pub fn bh_column(&self, i: usize) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.bh(p)[i]).collect()
    }

    pub fn b_column(&self, i: usize) -> Option<Vec<f64>> {
        self.paths_b
            .as_ref()
            .map(|_| (0..self.n_paths).map(|p| self.b(p).unwrap()[i]).collect())
    }

    /// CSV with header `path,node,t,b,bh`; `b` is left empty when absent.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "path,node,t,b,bh")?;
        let times = self.grid.times();
        for p in 0..self.n_paths {
            let bh = self.bh(p);
            let b = self.b(p);
            let id = self.first_path + p as u64;
            for (i, t) in times.iter().enumerate() {
                match b {
                    Some(b) => writeln!(w, "{id},{i},{t},{},{}", b[i], bh[i])?,
                    None => writeln!(w, "{id},{i},{t},,{}", bh[i])?,
                }
            }
        }
        Ok(())
    }

    /// Binary export: a 32-byte little-endian header followed, per path, by
    /// `nodes` values of `B` (NaN when absent) and `nodes` values of `B^H`.
    ///
    /// Header layout: `"FWN1"`, method code `u8`, `log2(nodes - 1)` `u8`,
    /// two zero bytes, `n_paths` `u32`, seed `u64`, `H` `f64`, `T` `f32`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        let header = BinaryHeader {
            method: self.method,
            grid: self.grid,
            n_paths: self.n_paths,
            seed: self.seed,
            hurst: self.hurst,
        };
        w.write_all(&header.encode()?)?;
        let n = self.nodes();
        let mut buf = Vec::with_capacity(16 * n);
        for p in 0..self.n_paths {
            buf.clear();
            match self.b(p) {
                Some(b) => b
                    .iter()
                    .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
                None => (0..n).for_each(|_| buf.extend_from_slice(&f64::NAN.to_le_bytes())),
            }
            self.bh(p)
                .iter()
                .for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
            w.write_all(&buf)?;
        }
        Ok(())
    }
}

pub const BINARY_MAGIC: &[u8; 4] = b"FWN1";

/// Decoded 32-byte header of the binary ensemble format.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryHeader {
    pub method: GeneratorMethod,
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub seed: u64,
    pub hurst: f64,
}

impl BinaryHeader {
    pub fn encode(&self) -> Result<[u8; 32]> {
        let mut h = [0u8; 32];
        h[0..4].copy_from_slice(BINARY_MAGIC);
        h[4] = self.method.code();
        h[5] = self.grid.steps().trailing_zeros() as u8;
        let n_paths = u32::try_from(self.n_paths)
            .map_err(|_| FwnError::Config("too many paths for the binary format".into()))?;
        h[8..12].copy_from_slice(&n_paths.to_le_bytes());
        h[12..20].copy_from_slice(&self.seed.to_le_bytes());
        h[20..28].copy_from_slice(&self.hurst.to_le_bytes());
        h[28..32].copy_from_slice(&(self.grid.horizon() as f32).to_le_bytes());
        Ok(h)
    }

    pub fn decode(h: &[u8; 32]) -> Result<Self> {
        if &h[0..4] != BINARY_MAGIC {
            return Err(FwnError::Config("bad magic in binary ensemble".into()));
        }
        let method = GeneratorMethod::from_code(h[4])?;
        let nodes = (1usize << h[5]) + 1;
        let n_paths = u32::from_le_bytes(h[8..12].try_into().unwrap()) as usize;
        let seed = u64::from_le_bytes(h[12..20].try_into().unwrap());
        let hurst = f64::from_le_bytes(h[20..28].try_into().unwrap());
        let horizon = f32::from_le_bytes(h[28..32].try_into().unwrap()) as f64;
        Ok(Self {
            method,
            grid: TimeGrid::new(horizon, nodes)?,
            n_paths,
            seed,
            hurst,
        })
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut h = [0u8; 32];
        r.read_exact(&mut h)?;
        Self::decode(&h)
    }
}

/// Covariance of the fGn increments `ΔB^H` at lag `k`:
/// `c_h dt^(2H) (|k+1|^(2H) + |k-1|^(2H) - 2|k|^(2H))`.
pub fn fgn_covariance(model: &HurstModel, grid: &TimeGrid, lag: usize) -> Result<f64> {
    if lag >= grid.steps() {
        return Err(FwnError::Domain(format!(
            "lag {lag} out of range for {} increments",
            grid.steps()
        )));
    }
    Ok(fgn_autocov(model, grid.dt(), lag))
}

pub(crate) fn fgn_autocov(model: &HurstModel, dt: f64, lag: usize) -> f64 {
    let e = 2.0 * model.hurst();
    let k = lag as f64;
    model.c_h() * dt.powf(e) * ((k + 1.0).powf(e) + (k - 1.0).abs().powf(e) - 2.0 * k.powf(e))
}

/// `Cov(B(u), B^H(t)) = ∫_0^u M_t(s) ds`, by quadrature of the kernel.
pub fn cross_covariance(model: &HurstModel, u: f64, t: f64) -> Result<f64> {
    if u < 0.0 || t < 0.0 {
        return Err(FwnError::Domain(format!(
            "times must be nonnegative, got u={u}, t={t}"
        )));
    }
    let f = |s: f64| frackernel::m_indicator(model, t, s);
    let opts = QuadOptions::default().with_abs_tol(1e-12);
    Ok(quad::integrate_with_breaks(&f, 0.0, u, &[t], &opts)?.value)
}

/// Cell partition of the real line used by M synthesis.
///
/// `[0, T]` is split into the time-grid cells; outside it, cells start at
/// width `dt` and grow geometrically up to the truncation radius `R`. Beyond
/// `R` the kernel is replaced by its leading term `p (H-1/2) t |x|^(H-3/2)`,
/// which makes each far tail a single Gaussian scaled by `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialPartition {
    pub truncation: f64,
    pub growth: f64,
}

impl SpatialPartition {
    pub fn for_horizon(horizon: f64) -> Self {
        Self {
            truncation: DEFAULT_TRUNCATION_FACTOR * horizon,
            growth: 1.15,
        }
    }

    /// Standard deviations of the left and right far tails per unit of
    /// `∫ φ` (for `φ = χ_[0,t]` this is per unit of `t`).
    pub fn tail_scales(&self, model: &HurstModel, grid: &TimeGrid) -> (f64, f64) {
        let a = model.exponent();
        let k = model.kernel_const();
        let sd = |start: f64| k * (start.powf(2.0 * a - 1.0) / (1.0 - 2.0 * a)).sqrt();
        (sd(self.truncation), sd(grid.horizon() + self.truncation))
    }

    /// Outer cells as `(lo, hi)` pairs: left side first, then right side.
    pub fn outer_cells(&self, grid: &TimeGrid) -> Vec<(f64, f64)> {
        let t_end = grid.horizon();
        let mut widths = Vec::new();
        let mut w = grid.dt();
        let mut reach = 0.0;
        while reach < self.truncation {
            let step = w.min(self.truncation - reach);
            widths.push(step);
            reach += step;
            w *= self.growth;
        }
        let mut cells = Vec::with_capacity(2 * widths.len());
        let mut edge = 0.0;
        for &w in &widths {
            cells.push((-(edge + w), -edge));
            edge += w;
        }
        let mut edge = t_end;
        for &w in &widths {
            cells.push((edge, edge + w));
            edge += w;
        }
        cells
    }
}

/// Reusable sampler: all per-grid precomputation happens once in [`Sampler::new`].
pub struct Sampler {
    model: HurstModel,
    grid: TimeGrid,
    method: GeneratorMethod,
    partition: SpatialPartition,
    kind: SamplerKind,
}

enum SamplerKind {
    Cholesky {
        lower: Vec<f64>,
    },
    Circulant {
        sqrt_eig: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    MSynthesis(Box<MSynthesis>),
}

struct MSynthesis {
    conv_len: usize,
    kernel_spec: Vec<Complex<f64>>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `e_j` weights of the shared `∫ sgn(s)|s|^a` part.
    shared: Vec<f64>,
    inside_scale: f64,
    /// `nodes × outer` weights, row-major.
    outer: Vec<f64>,
    n_outer: usize,
    tail_left: f64,
    tail_right: f64,
}

impl Sampler {
    pub fn new(model: &HurstModel, grid: TimeGrid, method: GeneratorMethod) -> Result<Self> {
        Self::with_partition(
            model,
            grid,
            method,
            SpatialPartition::for_horizon(grid.horizon()),
        )
    }

    pub fn with_partition(
        model: &HurstModel,
        grid: TimeGrid,
        method: GeneratorMethod,
        partition: SpatialPartition,
    ) -> Result<Self> {
        let kind = match method {
            GeneratorMethod::Cholesky => SamplerKind::Cholesky {
                lower: cholesky_factor(model, &grid)?,
            },
            GeneratorMethod::Circulant => {
                let eig = circulant_eigenvalues(model, &grid)?;
                let m2 = eig.len();
                let sqrt_eig = eig.iter().map(|l| (l / m2 as f64).sqrt()).collect();
                let fft = FftPlanner::new().plan_fft_forward(m2);
                SamplerKind::Circulant { sqrt_eig, fft }
            }
            GeneratorMethod::MSynthesis => {
                SamplerKind::MSynthesis(Box::new(MSynthesis::new(model, &grid, partition)?))
            }
        };
        Ok(Self {
            model: model.clone(),
            grid,
            method,
            partition,
            kind,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn method(&self) -> GeneratorMethod {
        self.method
    }

    /// Width of the far-field noise block per path (0 for exact generators).
    pub fn far_width(&self) -> usize {
        match &self.kind {
            SamplerKind::MSynthesis(ms) => ms.n_outer + 2,
            _ => 0,
        }
    }

    /// Samples paths `range`. For exact generators, `with_brownian` attaches
    /// an independent Brownian path (the ensemble is flagged uncoupled).
    pub fn sample(&self, seed: u64, range: Range<u64>, with_brownian: bool) -> DriverEnsemble {
        let n = self.grid.nodes();
        let rows: Vec<(Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>)> = range
            .clone()
            .into_par_iter()
            .map(|p| self.sample_path(seed, p, with_brownian))
            .collect();
        let n_paths = rows.len();
        let coupled = self.method == GeneratorMethod::MSynthesis;
        let mut paths_bh = Vec::with_capacity(n_paths * n);
        let has_b = coupled || with_brownian;
        let mut paths_b = has_b.then(|| Vec::with_capacity(n_paths * n));
        let far_width = self.far_width();
        let mut far_field = (far_width > 0).then(|| Vec::with_capacity(n_paths * far_width));
        for (b, bh, far) in rows {
            paths_bh.extend(bh);
            if let (Some(dst), Some(b)) = (paths_b.as_mut(), b) {
                dst.extend(b);
            }
            if let (Some(dst), Some(f)) = (far_field.as_mut(), far) {
                dst.extend(f);
            }
        }
        DriverEnsemble {
            grid: self.grid,
            hurst: self.model.hurst(),
            seed,
            method: self.method,
            first_path: range.start,
            n_paths,
            coupled,
            paths_b,
            paths_bh,
            far_field,
            far_width,
            partition: coupled.then_some(self.partition),
        }
    }

    fn sample_path(
        &self,
        seed: u64,
        path: u64,
        with_brownian: bool,
    ) -> (Option<Vec<f64>>, Vec<f64>, Option<Vec<f64>>) {
        let n = self.grid.nodes();
        let m = self.grid.steps();
        let scale = self.model.path_scale();
        let mut stream = PathStream::new(seed, Domain::Driver, path);
        let independent_b = || {
            let mut s = PathStream::new(seed, Domain::IndependentBrownian, path);
            let sd = self.grid.dt().sqrt();
            let mut b = Vec::with_capacity(n);
            b.push(0.0);
            let mut acc = 0.0;
            for _ in 0..m {
                acc += sd * s.normal();
                b.push(acc);
            }
            b
        };
        match &self.kind {
            SamplerKind::Cholesky { lower } => {
                let mut z = vec![0.0; m];
                stream.fill_normal(&mut z);
                let mut bh = Vec::with_capacity(n);
                bh.push(0.0);
                let mut acc = 0.0;
                for i in 0..m {
                    let row = &lower[i * m..i * m + i + 1];
                    let inc: f64 = row.iter().zip(&z[..=i]).map(|(l, z)| l * z).sum();
                    acc += inc;
                    bh.push(scale * acc);
                }
                (with_brownian.then(independent_b), bh, None)
            }
            SamplerKind::Circulant { sqrt_eig, fft } => {
                let m2 = sqrt_eig.len();
                let mut buf: Vec<Complex<f64>> = sqrt_eig
                    .iter()
                    .map(|s| {
                        let re = stream.normal();
                        let im = stream.normal();
                        Complex::new(s * re, s * im)
                    })
                    .collect();
                debug_assert_eq!(buf.len(), m2);
                fft.process(&mut buf);
                let mut bh = Vec::with_capacity(n);
                bh.push(0.0);
                let mut acc = 0.0;
                for c in &buf[..m] {
                    acc += c.re;
                    bh.push(scale * acc);
                }
                (with_brownian.then(independent_b), bh, None)
            }
            SamplerKind::MSynthesis(ms) => {
                let (b, mut bh, far) = ms.sample(&self.grid, &mut stream);
                for v in bh.iter_mut() {
                    *v *= scale;
                }
                (Some(b), bh, Some(far))
            }
        }
    }
}

fn increment_covariance_matrix(model: &HurstModel, grid: &TimeGrid) -> Vec<f64> {
    let m = grid.steps();
    let gamma: Vec<f64> = (0..m).map(|k| fgn_autocov(model, grid.dt(), k)).collect();
    let mut c = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            c[i * m + j] = gamma[i.abs_diff(j)];
        }
    }
    c
}

/// Lower-triangular factor of the increment covariance, row-major `m × m`.
fn cholesky_factor(model: &HurstModel, grid: &TimeGrid) -> Result<Vec<f64>> {
    let m = grid.steps();
    if grid.nodes() > (1 << 11) + 1 {
        return Err(FwnError::Config(format!(
            "Cholesky generator is limited to 2^11 + 1 nodes, got {}",
            grid.nodes()
        )));
    }
    let mut l = increment_covariance_matrix(model, grid);
    let mut min_pivot = f64::INFINITY;
    for j in 0..m {
        let mut d = l[j * m + j];
        for k in 0..j {
            d -= l[j * m + k] * l[j * m + k];
        }
        min_pivot = min_pivot.min(d);
        if !(d > 0.0) {
            return Err(FwnError::Numeric {
                message: format!("increment covariance not positive definite at row {j}"),
                value: d,
            });
        }
        let djj = d.sqrt();
        l[j * m + j] = djj;
        for i in j + 1..m {
            let mut s = l[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k];
            }
            l[i * m + j] = s / djj;
        }
        for k in j + 1..m {
            l[j * m + k] = 0.0;
        }
    }
    Ok(l)
}

/// Eigenvalues of the `2m` circulant embedding of the fGn covariance.
pub fn circulant_eigenvalues(model: &HurstModel, grid: &TimeGrid) -> Result<Vec<f64>> {
    let m = grid.steps();
    let m2 = 2 * m;
    let mut row: Vec<Complex<f64>> = (0..m2)
        .map(|k| {
            let lag = if k <= m { k } else { m2 - k };
            Complex::new(fgn_autocov(model, grid.dt(), lag), 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(m2).process(&mut row);
    let scale = row.iter().map(|c| c.re.abs()).fold(0.0, f64::max);
    let mut eig = Vec::with_capacity(m2);
    for c in row {
        let l = c.re;
        if l < -1e-10 * scale {
            return Err(FwnError::Numeric {
                message: "negative circulant eigenvalue; double the grid".into(),
                value: l,
            });
        }
        eig.push(l.max(0.0));
    }
    Ok(eig)
}

impl MSynthesis {
    fn new(model: &HurstModel, grid: &TimeGrid, partition: SpatialPartition) -> Result<Self> {
        let n = grid.nodes();
        let m = grid.steps();
        let dt = grid.dt();
        let a = model.exponent();
        let b = a + 1.0;
        let p = model.m_prefactor();
        let pw = |k: f64| k.abs().powf(b);

        // Inside cells: cellint(t_i, j) = p dt^b / b (e_j - D(i - j)).
        let shared: Vec<f64> = (0..m).map(|j| pw(j as f64 + 1.0) - pw(j as f64)).collect();
        let conv_len = (n + m - 1).next_power_of_two();
        let mut kernel = vec![Complex::new(0.0, 0.0); conv_len];
        for k in -(m as i64 - 1)..=(n as i64 - 1) {
            let d = pw(k as f64 - 1.0) - pw(k as f64);
            kernel[k.rem_euclid(conv_len as i64) as usize] = Complex::new(d, 0.0);
        }
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(conv_len);
        let inv = planner.plan_fft_inverse(conv_len);
        fwd.process(&mut kernel);
        let inside_scale = p * dt.powf(b) / b / dt.sqrt();

        let cells = partition.outer_cells(grid);
        let n_outer = cells.len();
        let mut outer = vec![0.0; n * n_outer];
        for i in 1..n {
            let t = grid.time(i);
            for (k, &(lo, hi)) in cells.iter().enumerate() {
                outer[i * n_outer + k] =
                    frackernel::m_indicator_cell_integral(model, t, lo, hi) / (hi - lo).sqrt();
            }
        }
        let (tail_left, tail_right) = partition.tail_scales(model, grid);
        Ok(Self {
            conv_len,
            kernel_spec: kernel,
            fwd,
            inv,
            shared,
            inside_scale,
            outer,
            n_outer,
            tail_left,
            tail_right,
        })
    }

    fn sample(&self, grid: &TimeGrid, stream: &mut PathStream) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = grid.nodes();
        let m = grid.steps();
        let sd = grid.dt().sqrt();
        let mut z = vec![0.0; m];
        stream.fill_normal(&mut z);
        let mut far = vec![0.0; self.n_outer + 2];
        stream.fill_normal(&mut far);

        let mut b = Vec::with_capacity(n);
        b.push(0.0);
        let mut acc = 0.0;
        for zj in &z {
            acc += sd * zj;
            b.push(acc);
        }

        let shared_sum: f64 = self.shared.iter().zip(&z).map(|(e, z)| e * z).sum();
        let mut buf = vec![Complex::new(0.0, 0.0); self.conv_len];
        for (dst, zj) in buf.iter_mut().zip(&z) {
            dst.re = *zj;
        }
        self.fwd.process(&mut buf);
        for (x, k) in buf.iter_mut().zip(&self.kernel_spec) {
            *x *= k;
        }
        self.inv.process(&mut buf);
        let norm = 1.0 / self.conv_len as f64;

        let (outer_z, tails) = far.split_at(self.n_outer);
        let mut bh = vec![0.0; n];
        for (i, out) in bh.iter_mut().enumerate().skip(1) {
            let inside = self.inside_scale * (shared_sum - buf[i].re * norm);
            let row = &self.outer[i * self.n_outer..(i + 1) * self.n_outer];
            let outside: f64 = row.iter().zip(outer_z).map(|(w, z)| w * z).sum();
            let t = grid.time(i);
            let tail = t * (self.tail_left * tails[0] + self.tail_right * tails[1]);
            *out = inside + outside + tail;
        }
        (b, bh, far)
    }
}

/// Exact sampler on the Cholesky factor of the increment covariance.
pub fn generate_cholesky(
    model: &HurstModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<DriverEnsemble> {
    Ok(
        Sampler::new(model, grid, GeneratorMethod::Cholesky)?.sample(
            seed,
            0..n_paths as u64,
            false,
        ),
    )
}

/// Davies–Harte circulant embedding.
pub fn generate_circulant(
    model: &HurstModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<DriverEnsemble> {
    Ok(
        Sampler::new(model, grid, GeneratorMethod::Circulant)?.sample(
            seed,
            0..n_paths as u64,
            false,
        ),
    )
}

/// Coupled `(B, B^H)` through `B^H(t) = Σ_cells M̄_t ΔB`.
pub fn generate_via_m(
    model: &HurstModel,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    partition: SpatialPartition,
) -> Result<DriverEnsemble> {
    Ok(
        Sampler::with_partition(model, grid, GeneratorMethod::MSynthesis, partition)?.sample(
            seed,
            0..n_paths as u64,
            false,
        ),
    )
}

/// Generic entry point by method name.
pub fn generate(
    model: &HurstModel,
    grid: TimeGrid,
    method: GeneratorMethod,
    n_paths: usize,
    seed: u64,
) -> Result<DriverEnsemble> {
    Ok(Sampler::new(model, grid, method)?.sample(seed, 0..n_paths as u64, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{covariance_estimate, variance_estimate, MeanEstimate};

    fn model(h: f64) -> HurstModel {
        HurstModel::new(h).unwrap()
    }

    #[test]
    fn time_grid_invariants() {
        let g = TimeGrid::new(1.0, 1025).unwrap();
        assert_eq!(g.time(0), 0.0);
        assert_eq!(g.time(1024), 1.0);
        assert!(g.times().windows(2).all(|w| w[1] > w[0]));
        assert!(TimeGrid::new(1.0, 1000).is_err());
        assert!(TimeGrid::new(0.0, 1025).is_err());
    }

    #[test]
    fn fgn_covariance_lag_zero_and_one() {
        let m = model(0.75);
        let g = TimeGrid::new(4.0, 5).unwrap(); // dt = 1
        assert!((fgn_covariance(&m, &g, 0).unwrap() - 2.0 * m.c_h()).abs() < 1e-15);
        let expected = m.c_h() * (2f64.powf(1.5) - 2.0);
        assert!((fgn_covariance(&m, &g, 1).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.123_66).abs() < 1e-5);
        assert!(fgn_covariance(&m, &g, 4).is_err());
    }

    #[test]
    fn fgn_covariance_positive_with_power_law_decay() {
        let m = model(0.75);
        let g = TimeGrid::new(128.0, 129).unwrap();
        for k in 1..=64 {
            assert!(fgn_covariance(&m, &g, k).unwrap() > 0.0);
        }
        let k = 64.0f64;
        let asym = 2.0 * 0.75 * 0.5 * m.c_h() * k.powf(-0.5);
        assert!((fgn_covariance(&m, &g, 64).unwrap() / asym - 1.0).abs() < 1e-3);
    }

    #[test]
    fn circulant_eigenvalues_nonnegative() {
        for h in [0.6, 0.75, 0.9] {
            let m = model(h);
            for k in [8u32, 10, 12] {
                let g = TimeGrid::new(1.0, (1 << k) + 1).unwrap();
                let eig = circulant_eigenvalues(&m, &g).unwrap();
                assert!(eig.iter().all(|l| *l >= 0.0), "H={h} k={k}");
            }
        }
    }

    #[test]
    fn paths_start_at_zero() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 65).unwrap();
        for method in [
            GeneratorMethod::Cholesky,
            GeneratorMethod::Circulant,
            GeneratorMethod::MSynthesis,
        ] {
            let e = generate(&m, g, method, 5, 1).unwrap();
            for p in 0..5 {
                assert_eq!(e.bh(p)[0], 0.0);
                if let Some(b) = e.b(p) {
                    assert_eq!(b[0], 0.0);
                }
            }
        }
    }

    #[test]
    fn sub_ranges_reproduce_full_ensemble() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 65).unwrap();
        for method in [
            GeneratorMethod::Cholesky,
            GeneratorMethod::Circulant,
            GeneratorMethod::MSynthesis,
        ] {
            let s = Sampler::new(&m, g, method).unwrap();
            let full = s.sample(9, 0..10, false);
            let part = s.sample(9, 4..7, false);
            assert_eq!(part.bh(0), full.bh(4));
            assert_eq!(part.bh(2), full.bh(6));
        }
    }

    #[test]
    fn exact_generators_flag_uncoupled_brownian() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 17).unwrap();
        let s = Sampler::new(&m, g, GeneratorMethod::Circulant).unwrap();
        let e = s.sample(3, 0..4, true);
        assert!(!e.coupled);
        assert!(e.paths_b.is_some());
        let plain = s.sample(3, 0..4, false);
        assert!(plain.brownian_increments(0).is_err());
        let via = generate(&m, g, GeneratorMethod::MSynthesis, 2, 3).unwrap();
        assert!(via.coupled);
    }

    #[test]
    fn cholesky_grid_limit() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, (1 << 12) + 1).unwrap();
        assert!(matches!(
            generate_cholesky(&m, g, 1, 0),
            Err(FwnError::Config(_))
        ));
    }

    #[test]
    fn cross_covariance_properties() {
        let m = model(0.75);
        assert_eq!(cross_covariance(&m, 0.0, 1.0).unwrap(), 0.0);
        let mut prev = 0.0;
        for k in 1..=10 {
            let u = k as f64 / 10.0;
            let c = cross_covariance(&m, u, 1.0).unwrap();
            assert!(c > prev);
            assert!((c - frackernel::m_indicator_antiderivative(&m, 1.0, u)).abs() < 1e-10);
            prev = c;
        }
    }

    #[test]
    fn m_synthesis_variance_close_to_law() {
        // Small ensemble; checks the deterministic second moment of the
        // synthesis weights rather than Monte Carlo.
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 257).unwrap();
        let s = Sampler::new(&m, g, GeneratorMethod::MSynthesis).unwrap();
        let SamplerKind::MSynthesis(ms) = &s.kind else {
            unreachable!()
        };
        let i = g.steps();
        let mstep = g.steps();
        // Inside weights for node i.
        let mut var = 0.0;
        for j in 0..mstep {
            let w = ms.inside_scale
                * (ms.shared[j]
                    - ((i as f64 - j as f64 - 1.0).abs().powf(1.25)
                        - (i as f64 - j as f64).abs().powf(1.25)));
            var += w * w;
        }
        var += ms.outer[i * ms.n_outer..(i + 1) * ms.n_outer]
            .iter()
            .map(|w| w * w)
            .sum::<f64>();
        var += ms.tail_left.powi(2) + ms.tail_right.powi(2);
        assert!(
            (var / m.variance(1.0) - 1.0).abs() < 2e-3,
            "{var} vs {}",
            m.variance(1.0)
        );
    }

    #[test]
    fn small_ensemble_moments_are_sane() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 33).unwrap();
        let e = generate_circulant(&m, g, 4000, 11).unwrap();
        let col = e.bh_column(32);
        let v = variance_estimate(&col);
        assert!((v.mean - m.variance(1.0)).abs() < 4.0 * v.std_error);
        let mean = MeanEstimate::from_samples(&col);
        assert!(mean.mean.abs() < 4.0 * mean.std_error);
        let c = covariance_estimate(&e.bh_column(16), &col);
        assert!((c.mean - m.covariance(0.5, 1.0)).abs() < 4.0 * c.std_error);
    }

    #[test]
    fn unit_variance_mode_rescales() {
        let m = model(0.75).with_normalization(frackernel::Normalization::UnitVariance);
        let g = TimeGrid::new(1.0, 17).unwrap();
        let e = generate_circulant(&m, g, 4000, 5).unwrap();
        let v = variance_estimate(&e.bh_column(16));
        assert!((v.mean - 1.0).abs() < 4.0 * v.std_error);
    }

    #[test]
    fn csv_and_binary_exports() {
        let m = model(0.75);
        let g = TimeGrid::new(1.0, 9).unwrap();
        let e = generate(&m, g, GeneratorMethod::MSynthesis, 3, 42).unwrap();
        let mut csv = Vec::new();
        e.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("path,node,t,b,bh\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 9);

        let mut bin = Vec::new();
        e.write_binary(&mut bin).unwrap();
        assert_eq!(bin.len(), 32 + 3 * 2 * 9 * 8);
        let h = BinaryHeader::read(bin.as_slice()).unwrap();
        assert_eq!(h.method, GeneratorMethod::MSynthesis);
        assert_eq!(h.grid, g);
        assert_eq!(h.n_paths, 3);
        assert_eq!(h.seed, 42);
        assert_eq!(h.hurst, 0.75);
        let first_bh = f64::from_le_bytes(bin[32 + 9 * 8 + 8..32 + 9 * 8 + 16].try_into().unwrap());
        assert_eq!(first_bh, e.bh(0)[1]);
    }
}
