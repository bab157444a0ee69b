//! Named verification experiments with Monte-Carlo accounting.
//!
//! Each experiment turns one identity or bound into an [`ExperimentReport`].
//! Ensembles are produced in chunks of paths; since every path comes from its
//! own keyed stream and per-path samples are concatenated in path order, the
//! reports do not depend on the chunk size or the number of workers.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{FwnError, Result};
use crate::fbmgen::{DriverEnsemble, GeneratorMethod, Sampler, TimeGrid};
use crate::frackernel::{HurstModel, Profile, CALIBRATION_GATE_TOL};
use crate::sdesolve::{self, Coefficient, InitialDist, PicardOptions, PicardSummary, SdeSpec};
use crate::stats::{
    covariance_estimate, ks_two_sample, ks_two_sample_critical, variance_estimate, MeanEstimate,
};
use crate::wiscalc::{self, CorpusIntegrand, FractionalWisProcess, TerminalWeights};

/// Equality margin in standard errors.
pub const EQUALITY_SE: f64 = 4.0;
/// Relative-SE slack factor for upper bounds.
pub const BOUND_SE: f64 = 3.0;
/// A standard error above this fraction of a nonzero target is inconclusive.
pub const INCONCLUSIVE_FRACTION: f64 = 0.25;
/// Paths used by the two-sample generator comparison.
pub const EQUIV_PATHS: usize = 10_000;
/// Paths used by the Gronwall experiment (its increments are per node).
pub const GRONWALL_PATHS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Equality,
    UpperBound,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Calibration,
    Variance,
    Covariance,
    Moment4,
    /// Variance, covariance and fourth moment from one ensemble.
    FbmLaw,
    GeneratorEquiv,
    ZeroMean,
    Isometry,
    ProductRule,
    ItoSquare,
    L2Bound,
    Picard,
    Gronwall,
}

impl Experiment {
    /// The suite run by `all`.
    pub fn all() -> Vec<Experiment> {
        use Experiment::*;
        vec![
            Calibration,
            FbmLaw,
            GeneratorEquiv,
            ZeroMean,
            Isometry,
            ProductRule,
            ItoSquare,
            L2Bound,
            Picard,
            Gronwall,
        ]
    }

    pub fn name(self) -> &'static str {
        use Experiment::*;
        match self {
            Calibration => "calibration",
            Variance => "variance",
            Covariance => "covariance",
            Moment4 => "moment4",
            FbmLaw => "fbm_law",
            GeneratorEquiv => "generator_equiv",
            ZeroMean => "zero_mean",
            Isometry => "isometry",
            ProductRule => "product_rule",
            ItoSquare => "ito_square",
            L2Bound => "l2_bound",
            Picard => "picard",
            Gronwall => "gronwall",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = FwnError;
    fn from_str(s: &str) -> Result<Self> {
        use Experiment::*;
        Experiment::all()
            .into_iter()
            .chain([Variance, Covariance, Moment4])
            .find(|e| e.name() == s)
            .ok_or_else(|| FwnError::Usage(format!("unknown experiment '{s}'")))
    }
}

/// Parses an experiment name or `all`.
pub fn parse_selection(s: &str) -> Result<Vec<Experiment>> {
    if s == "all" {
        Ok(Experiment::all())
    } else {
        Ok(vec![s.parse()?])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    /// Integrand or sub-case the report refers to.
    pub case: String,
    pub hurst: f64,
    pub t: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    pub mode: Mode,
    pub verdict: Verdict,
    pub pass: bool,
    /// Equality: `|estimate - target| / std_error`. Upper bound:
    /// `estimate - target (1 + 3 rel. SE)` (negative when passing).
    pub margin: f64,
    pub n_paths: usize,
    pub nodes: usize,
    pub horizon: f64,
    pub seed: u64,
    pub method: String,
    pub wall_time: Option<f64>,
    pub detail: BTreeMap<String, Value>,
}

fn judge(mode: Mode, estimate: f64, se: f64, target: f64) -> (Verdict, f64) {
    let pass = match mode {
        Mode::Equality => (estimate - target).abs() <= EQUALITY_SE * se,
        Mode::UpperBound => {
            let rel = if estimate > 0.0 { se / estimate } else { 0.0 };
            estimate <= target * (1.0 + BOUND_SE * rel)
        }
    };
    let margin = match mode {
        Mode::Equality if se > 0.0 => (estimate - target).abs() / se,
        Mode::Equality => {
            if estimate == target {
                0.0
            } else {
                f64::INFINITY
            }
        }
        Mode::UpperBound => {
            let rel = if estimate > 0.0 { se / estimate } else { 0.0 };
            estimate - target * (1.0 + BOUND_SE * rel)
        }
    };
    let inconclusive = target != 0.0 && se > INCONCLUSIVE_FRACTION * target.abs();
    let verdict = if inconclusive {
        Verdict::Inconclusive
    } else if pass {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    (verdict, margin)
}

/// Configuration shared by all experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub hurst: f64,
    pub horizon: f64,
    pub nodes: usize,
    pub n_paths: usize,
    pub seed: u64,
    /// Generator for the pure fBm-law experiments; integral and SDE
    /// experiments always use the coupled M-synthesis driver.
    pub method: GeneratorMethod,
    /// Integrand corpus override.
    pub integrands: Option<Vec<CorpusIntegrand>>,
    /// Evaluation times for the L² bound.
    pub times: Vec<f64>,
    /// SDE for the Picard and Gronwall experiments.
    pub sde: Option<SdeSpec>,
    pub chunk: usize,
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            hurst: 0.75,
            horizon: 1.0,
            nodes: 1025,
            n_paths: 100_000,
            seed: 1,
            method: GeneratorMethod::Circulant,
            integrands: None,
            times: vec![0.25, 1.0],
            sde: None,
            chunk: 8192,
            timing: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        crate::frackernel::c_h(self.hurst)?;
        let grid = TimeGrid::new(self.horizon, self.nodes)?;
        if self.n_paths < 2 {
            return Err(FwnError::Config("need at least two paths".into()));
        }
        if self.chunk == 0 {
            return Err(FwnError::Config("chunk size must be positive".into()));
        }
        if let Some(t) = self
            .times
            .iter()
            .find(|t| !(**t > 0.0 && **t <= grid.horizon()))
        {
            return Err(FwnError::Config(format!(
                "evaluation time {t} outside (0, T]"
            )));
        }
        if let Some(spec) = &self.sde {
            if (spec.horizon - self.horizon).abs() > 1e-12 * self.horizon {
                return Err(FwnError::Config(format!(
                    "SDE horizon {} differs from grid horizon {}",
                    spec.horizon, self.horizon
                )));
            }
        }
        Ok(())
    }

    fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.nodes)
    }

    fn ranges(&self, n_paths: usize) -> Vec<Range<u64>> {
        (0..n_paths)
            .step_by(self.chunk)
            .map(|s| s as u64..(s + self.chunk).min(n_paths) as u64)
            .collect()
    }

    fn corpus(&self) -> Vec<CorpusIntegrand> {
        self.integrands
            .clone()
            .unwrap_or_else(CorpusIntegrand::corpus)
    }

    /// Default SDE: `dX = -X dt + dB^H`, `Z ~ N(1, 1)`.
    pub fn default_sde(horizon: f64) -> SdeSpec {
        SdeSpec {
            alpha: Coefficient::Linear(-1.0),
            beta: Coefficient::Zero,
            sigma: CorpusIntegrand::Const(1.0),
            initial: InitialDist::Normal { mean: 1.0, sd: 1.0 },
            lipschitz: 1.0,
            growth: 2.0,
            horizon,
        }
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    model: HurstModel,
    grid: TimeGrid,
    started: Instant,
}

impl Ctx<'_> {
    #[allow(clippy::too_many_arguments)]
    fn report(
        &self,
        name: &str,
        case: &str,
        t: f64,
        mode: Mode,
        estimate: f64,
        se: f64,
        target: f64,
        n_paths: usize,
        method: GeneratorMethod,
        detail: BTreeMap<String, Value>,
    ) -> ExperimentReport {
        let (verdict, margin) = judge(mode, estimate, se, target);
        ExperimentReport {
            name: name.into(),
            case: case.into(),
            hurst: self.model.hurst(),
            t,
            estimate,
            std_error: se,
            target,
            mode,
            verdict,
            pass: verdict == Verdict::Pass,
            margin,
            n_paths,
            nodes: self.grid.nodes(),
            horizon: self.grid.horizon(),
            seed: self.cfg.seed,
            method: method.name().into(),
            wall_time: self
                .cfg
                .timing
                .then(|| self.started.elapsed().as_secs_f64()),
            detail,
        }
    }

    fn for_each_chunk<F>(
        &self,
        method: GeneratorMethod,
        seed: u64,
        n_paths: usize,
        mut f: F,
    ) -> Result<()>
    where
        F: FnMut(&DriverEnsemble) -> Result<()>,
    {
        let sampler = Sampler::new(&self.model, self.grid, method)?;
        for range in self.cfg.ranges(n_paths) {
            f(&sampler.sample(seed, range, false))?;
        }
        Ok(())
    }
}

fn detail<I: IntoIterator<Item = (&'static str, Value)>>(items: I) -> BTreeMap<String, Value> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Runs one named experiment; may yield one report per integrand or sub-case.
pub fn run_experiment(
    experiment: Experiment,
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentReport>> {
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        model: HurstModel::new(cfg.hurst)?,
        grid: cfg.grid()?,
        started: Instant::now(),
    };
    match experiment {
        Experiment::Calibration => calibration(&ctx),
        Experiment::FbmLaw => fbm_law(&ctx),
        Experiment::Variance | Experiment::Covariance | Experiment::Moment4 => Ok(fbm_law(&ctx)?
            .into_iter()
            .filter(|r| r.name == experiment.name())
            .collect()),
        Experiment::GeneratorEquiv => generator_equiv(&ctx),
        Experiment::ZeroMean => zero_mean(&ctx),
        Experiment::Isometry => isometry(&ctx),
        Experiment::ProductRule => product_rule(&ctx),
        Experiment::ItoSquare => ito_square(&ctx),
        Experiment::L2Bound => l2_bound(&ctx),
        Experiment::Picard => picard(&ctx),
        Experiment::Gronwall => gronwall(&ctx),
    }
}

/// Runs a list of experiments in order.
pub fn run_suite(
    experiments: &[Experiment],
    cfg: &ExperimentConfig,
) -> Result<Vec<ExperimentReport>> {
    let mut out = Vec::new();
    for e in experiments {
        out.extend(run_experiment(*e, cfg)?);
    }
    Ok(out)
}

fn calibration(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cal = ctx.model.calibration();
    let worst = cal.gate.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    let choice = serde_json::to_value(cal.chosen).unwrap_or(Value::Null);
    let d = detail([
        ("m_prefactor", Value::from(cal.prefactor)),
        ("choice", choice),
        (
            "gate",
            serde_json::to_value(&cal.gate).unwrap_or(Value::Null),
        ),
        (
            "candidates",
            serde_json::to_value(&cal.candidates).unwrap_or(Value::Null),
        ),
    ]);
    Ok(vec![ctx.report(
        "calibration",
        "prefactor",
        ctx.grid.horizon(),
        Mode::UpperBound,
        worst,
        0.0,
        CALIBRATION_GATE_TOL,
        0,
        GeneratorMethod::MSynthesis,
        d,
    )])
}

fn fbm_law(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cfg = ctx.cfg;
    let last = ctx.grid.steps();
    let half = ctx.grid.index_of(0.5 * ctx.grid.horizon());
    let (mut end, mut mid) = (
        Vec::with_capacity(cfg.n_paths),
        Vec::with_capacity(cfg.n_paths),
    );
    ctx.for_each_chunk(cfg.method, cfg.seed, cfg.n_paths, |d| {
        end.extend(d.bh_column(last));
        mid.extend(d.bh_column(half));
        Ok(())
    })?;
    let t = ctx.grid.horizon();
    let s = ctx.grid.time(half);
    let scale2 = ctx.model.path_scale().powi(2);
    let var = ctx.model.variance(t) * scale2;
    let mean = MeanEstimate::from_samples(&end);
    let d = detail([
        ("sample_mean", Value::from(mean.mean)),
        ("sample_mean_se", Value::from(mean.std_error)),
    ]);
    let cases = [
        (
            Experiment::Variance,
            variance_estimate(&end),
            var,
            format!("t={t}"),
        ),
        (
            Experiment::Covariance,
            covariance_estimate(&mid, &end),
            ctx.model.covariance(s, t) * scale2,
            format!("s={s},t={t}"),
        ),
        (
            Experiment::Moment4,
            MeanEstimate::of(&end, |x| x.powi(4)),
            3.0 * var * var,
            format!("t={t}"),
        ),
    ];
    Ok(cases
        .into_iter()
        .map(|(e, est, target, case)| {
            ctx.report(
                e.name(),
                &case,
                t,
                Mode::Equality,
                est.mean,
                est.std_error,
                target,
                cfg.n_paths,
                cfg.method,
                d.clone(),
            )
        })
        .collect())
}

fn equiv_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn generator_equiv(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cfg = ctx.cfg;
    let n = cfg.n_paths.min(EQUIV_PATHS);
    let checkpoints: Vec<usize> = [0.25, 0.5, 0.75, 1.0]
        .iter()
        .map(|f| ctx.grid.index_of(f * ctx.grid.horizon()))
        .collect();
    let collect = |method: GeneratorMethod, seed: u64| -> Result<Vec<Vec<f64>>> {
        let mut cols = vec![Vec::with_capacity(n); checkpoints.len()];
        ctx.for_each_chunk(method, seed, n, |d| {
            for (c, &i) in cols.iter_mut().zip(&checkpoints) {
                c.extend(d.bh_column(i));
            }
            Ok(())
        })?;
        Ok(cols)
    };
    let candidate = if cfg.method == GeneratorMethod::Cholesky {
        GeneratorMethod::Circulant
    } else {
        cfg.method
    };
    let a = collect(candidate, cfg.seed)?;
    let b = collect(GeneratorMethod::Cholesky, equiv_seed(cfg.seed))?;
    let crit = ks_two_sample_critical(n, n, 0.01);
    let stats: Vec<f64> = a.iter().zip(&b).map(|(x, y)| ks_two_sample(x, y)).collect();
    let worst = stats.iter().copied().fold(0.0, f64::max);
    let d = detail([
        ("ks_per_node", Value::from(stats)),
        (
            "checkpoint_times",
            Value::from(
                checkpoints
                    .iter()
                    .map(|&i| ctx.grid.time(i))
                    .collect::<Vec<_>>(),
            ),
        ),
        ("reference", Value::from("cholesky")),
        ("reference_seed", Value::from(equiv_seed(cfg.seed))),
    ]);
    Ok(vec![ctx.report(
        "generator_equiv",
        &format!("{}_vs_cholesky", candidate.name()),
        ctx.grid.horizon(),
        Mode::UpperBound,
        worst,
        0.0,
        crit,
        n,
        candidate,
        d,
    )])
}

/// Per-path values of `X(t_node)` for every integrand, gathered over chunks
/// of a coupled ensemble.
fn integrals_at(
    ctx: &Ctx,
    integrands: &[CorpusIntegrand],
    node: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let cfg = ctx.cfg;
    let partition = crate::fbmgen::SpatialPartition::for_horizon(ctx.grid.horizon());
    let terminal = node == ctx.grid.steps();
    let weights: Vec<Option<TerminalWeights>> = integrands
        .iter()
        .map(|c| match (c.profile(), terminal) {
            (Some(p), true) => {
                TerminalWeights::new(&ctx.model, &p, &ctx.grid, &partition).map(Some)
            }
            _ => Ok(None),
        })
        .collect::<Result<_>>()?;
    let mut out = vec![Vec::with_capacity(cfg.n_paths); integrands.len()];
    ctx.for_each_chunk(GeneratorMethod::MSynthesis, seed, cfg.n_paths, |d| {
        for ((c, w), dst) in integrands.iter().zip(&weights).zip(out.iter_mut()) {
            let phi = c.materialize(d)?;
            let x = match w {
                Some(w) => wiscalc::wiener_integral_with(&phi, d, w)?,
                None => wiscalc::wick_riemann_integral(&ctx.model, &phi, d)?,
            };
            if terminal && w.is_some() {
                dst.extend(x.terminal);
            } else {
                dst.extend(x.column(node));
            }
        }
        Ok(())
    })?;
    Ok(out)
}

fn zero_mean(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let corpus = ctx.cfg.corpus();
    let xs = integrals_at(ctx, &corpus, ctx.grid.steps(), ctx.cfg.seed)?;
    Ok(corpus
        .iter()
        .zip(xs)
        .map(|(c, x)| {
            let m = MeanEstimate::from_samples(&x);
            let route = if c.profile().is_some() {
                "wiener_m_transform"
            } else {
                "wick_riemann"
            };
            ctx.report(
                "zero_mean",
                &c.name(),
                ctx.grid.horizon(),
                Mode::Equality,
                m.mean,
                m.std_error,
                0.0,
                ctx.cfg.n_paths,
                GeneratorMethod::MSynthesis,
                detail([("route", Value::from(route))]),
            )
        })
        .collect())
}

fn deterministic_corpus(ctx: &Ctx) -> Vec<CorpusIntegrand> {
    let mut c: Vec<CorpusIntegrand> = ctx
        .cfg
        .corpus()
        .into_iter()
        .filter(|c| c.profile().is_some())
        .collect();
    if !c.contains(&CorpusIntegrand::Cos) {
        c.push(CorpusIntegrand::Cos);
    }
    c
}

fn isometry(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let corpus = deterministic_corpus(ctx);
    let t = ctx.grid.horizon();
    let xs = integrals_at(ctx, &corpus, ctx.grid.steps(), ctx.cfg.seed)?;
    let mut out = Vec::new();
    for i in 0..corpus.len() {
        for j in i..corpus.len() {
            let prods: Vec<f64> = xs[i].iter().zip(&xs[j]).map(|(a, b)| a * b).collect();
            let m = MeanEstimate::from_samples(&prods);
            let target = wiscalc::product_moment(
                &ctx.model,
                &corpus[i].profile().unwrap(),
                &corpus[j].profile().unwrap(),
                t,
            )?;
            out.push(ctx.report(
                "isometry",
                &format!("{}*{}", corpus[i].name(), corpus[j].name()),
                t,
                Mode::Equality,
                m.mean,
                m.std_error,
                target,
                ctx.cfg.n_paths,
                GeneratorMethod::MSynthesis,
                BTreeMap::new(),
            ));
        }
    }
    // Indicator pair χ_[0,T], χ_[0,T/2]: target c_h (T^2H + (T/2)^2H - (T/2)^2H).
    let half = 0.5 * t;
    let ind = [Profile::indicator(0.0, t), Profile::indicator(0.0, half)];
    let partition = crate::fbmgen::SpatialPartition::for_horizon(t);
    let w: Vec<TerminalWeights> = ind
        .iter()
        .map(|p| TerminalWeights::new(&ctx.model, p, &ctx.grid, &partition))
        .collect::<Result<_>>()?;
    let mut prods = Vec::with_capacity(ctx.cfg.n_paths);
    ctx.for_each_chunk(
        GeneratorMethod::MSynthesis,
        ctx.cfg.seed,
        ctx.cfg.n_paths,
        |d| {
            for p in 0..d.n_paths {
                prods.push(w[0].apply(d, p)? * w[1].apply(d, p)?);
            }
            Ok(())
        },
    )?;
    let m = MeanEstimate::from_samples(&prods);
    let target = ctx.model.covariance(t, half) * ctx.model.path_scale().powi(2);
    out.push(ctx.report(
        "isometry",
        "indicator[0,T]*indicator[0,T/2]",
        t,
        Mode::Equality,
        m.mean,
        m.std_error,
        target,
        ctx.cfg.n_paths,
        GeneratorMethod::MSynthesis,
        BTreeMap::new(),
    ));
    Ok(out)
}

/// `σ ∈ {1, cos s, s}`.
fn sigma_cases() -> Vec<CorpusIntegrand> {
    vec![
        CorpusIntegrand::Const(1.0),
        CorpusIntegrand::Cos,
        CorpusIntegrand::Identity,
    ]
}

fn ito_square(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cases = sigma_cases();
    let t = ctx.grid.horizon();
    let xs = integrals_at(ctx, &cases, ctx.grid.steps(), ctx.cfg.seed)?;
    cases
        .iter()
        .zip(xs)
        .map(|(c, x)| {
            let mc = MeanEstimate::of(&x, |v| v * v);
            let rec = wiscalc::ito_square_check(&ctx.model, &c.profile().unwrap(), t, mc)?;
            Ok(ctx.report(
                "ito_square",
                &c.name(),
                t,
                Mode::Equality,
                rec.lhs,
                rec.lhs_se,
                rec.rhs,
                ctx.cfg.n_paths,
                GeneratorMethod::MSynthesis,
                BTreeMap::new(),
            ))
        })
        .collect()
}

fn product_rule(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cases = sigma_cases();
    let t = ctx.grid.horizon();
    // X_1 = 1 + ∫ 0.5 ds + ∫ σ dB^H, X_2 = 0.5 + ∫ s ds + ∫ 1 dB^H.
    let mut all = cases.clone();
    all.push(CorpusIntegrand::Const(1.0));
    let xs = integrals_at(ctx, &all, ctx.grid.steps(), ctx.cfg.seed)?;
    let x2_noise = &xs[cases.len()];
    let x2 = FractionalWisProcess {
        initial: 0.5,
        drift: Profile::new(|s| s),
        diffusion: Profile::new(|_| 1.0),
    };
    let m2 = x2.mean(t)?;
    cases
        .iter()
        .zip(&xs)
        .map(|(c, noise)| {
            let x1 = FractionalWisProcess {
                initial: 1.0,
                drift: Profile::new(|_| 0.5),
                diffusion: c.profile().unwrap(),
            };
            let m1 = x1.mean(t)?;
            let prods: Vec<f64> = noise
                .iter()
                .zip(x2_noise)
                .map(|(a, b)| (m1 + a) * (m2 + b))
                .collect();
            let est = MeanEstimate::from_samples(&prods);
            let target = wiscalc::product_rule_moment(&ctx.model, &x1, &x2, t)?;
            Ok(ctx.report(
                "product_rule",
                &c.name(),
                t,
                Mode::Equality,
                est.mean,
                est.std_error,
                target,
                ctx.cfg.n_paths,
                GeneratorMethod::MSynthesis,
                detail([
                    ("x1", Value::from("1 + 0.5 t + int sigma dB^H")),
                    ("x2", Value::from("0.5 + t^2/2 + B^H(t)")),
                ]),
            ))
        })
        .collect()
}

fn l2_bound(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let corpus = ctx.cfg.corpus();
    let mut out = Vec::new();
    for &t in &ctx.cfg.times {
        let node = ctx.grid.index_of(t);
        let t_node = ctx.grid.time(node);
        let xs = integrals_at(ctx, &corpus, node, ctx.cfg.seed)?;
        for (c, x) in corpus.iter().zip(xs) {
            let lhs = MeanEstimate::of(&x, |v| v * v);
            let msi = c.mean_square_integral(t_node)?;
            let rec = wiscalc::bound_check(&ctx.model, lhs, msi, t_node, c.nonnegative_on(t_node));
            let exact = match (c.profile(), c.kernel()) {
                (Some(p), _) => wiscalc::expected_square(&ctx.model, &p, t_node)?,
                (None, Some(h)) => {
                    wiscalc::second_moment_first_chaos(&ctx.model, &h, &ctx.grid, node)?.total
                }
                _ => f64::NAN,
            };
            let mut d = detail([
                ("ratio", Value::from(rec.ratio)),
                ("second_moment_exact", Value::from(exact)),
                ("mean_square_integral", Value::from(msi)),
            ]);
            if let Some(r) = rec.tight_ratio {
                d.insert("tight_ratio".into(), Value::from(r));
            }
            out.push(ctx.report(
                "l2_bound",
                &c.name(),
                t_node,
                Mode::UpperBound,
                rec.lhs,
                rec.lhs_se,
                rec.rhs,
                ctx.cfg.n_paths,
                GeneratorMethod::MSynthesis,
                d,
            ));
        }
    }
    Ok(out)
}

fn picard(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cfg = ctx.cfg;
    let spec = cfg
        .sde
        .clone()
        .unwrap_or_else(|| ExperimentConfig::default_sde(cfg.horizon));
    let opts = PicardOptions::default();
    let mut traces = Vec::with_capacity(cfg.n_paths);
    let mut euler = Vec::with_capacity(cfg.n_paths);
    let mut oracle = Vec::new();
    let linear = sdesolve::linear_oracle_moments(&ctx.model, &spec).is_ok();
    ctx.for_each_chunk(GeneratorMethod::MSynthesis, cfg.seed, cfg.n_paths, |d| {
        traces.extend(sdesolve::picard_traces(&ctx.model, &spec, d, opts.k_max)?);
        euler.extend(sdesolve::euler_solve(&ctx.model, &spec, d)?.terminal());
        if linear {
            oracle.extend(sdesolve::linear_oracle_terminal(&ctx.model, &spec, d)?);
        }
        Ok(())
    })?;
    let summary = PicardSummary::from_traces(&traces, &opts).map_err(|e| match e {
        FwnError::Divergence { deltas, .. } => FwnError::Divergence {
            lipschitz: spec.lipschitz,
            horizon: spec.horizon,
            deltas,
        },
        e => e,
    })?;
    let contraction =
        sdesolve::ContractionReport::from_deltas(summary.iterates_delta.clone(), spec.horizon);
    let t = spec.horizon;
    let n = cfg.n_paths;
    let m = GeneratorMethod::MSynthesis;
    let case = spec.fingerprint();
    let mut out = vec![
        ctx.report(
            "picard_contraction",
            &case,
            t,
            Mode::UpperBound,
            contraction.max_ratio,
            0.0,
            0.9,
            n,
            m,
            detail([
                ("deltas", Value::from(contraction.deltas.clone())),
                ("envelope", Value::from(contraction.envelope.clone())),
                ("a2_fitted", Value::from(contraction.a2)),
                ("tail_sums", Value::from(contraction.tail_sums.clone())),
            ]),
        ),
        ctx.report(
            "picard_envelope",
            &case,
            t,
            Mode::UpperBound,
            envelope_excess(&contraction),
            0.0,
            1.0,
            n,
            m,
            detail([("a2_fitted", Value::from(contraction.a2))]),
        ),
        ctx.report(
            "picard_residual",
            &case,
            t,
            Mode::UpperBound,
            summary.residual,
            0.0,
            opts.tol,
            n,
            m,
            detail([
                ("k_used", Value::from(summary.k_used)),
                ("converged", Value::from(summary.converged)),
            ]),
        ),
    ];
    let picard_t: Vec<f64> = traces
        .iter()
        .map(|tr| tr.terminal[summary.k_used])
        .collect();
    let pm = MeanEstimate::from_samples(&picard_t);
    let em = MeanEstimate::from_samples(&euler);
    out.push(ctx.report(
        "picard_euler_mean",
        &case,
        t,
        Mode::Equality,
        pm.mean - em.mean,
        pm.std_error.hypot(em.std_error),
        0.0,
        n,
        m,
        detail([
            ("picard_mean", Value::from(pm.mean)),
            ("euler_mean", Value::from(em.mean)),
        ]),
    ));
    let ps = MeanEstimate::of(&picard_t, |x| x * x);
    let es = MeanEstimate::of(&euler, |x| x * x);
    out.push(ctx.report(
        "picard_euler",
        &case,
        t,
        Mode::Equality,
        ps.mean - es.mean,
        ps.std_error.hypot(es.std_error),
        0.0,
        n,
        m,
        detail([
            ("picard_second_moment", Value::from(ps.mean)),
            ("euler_second_moment", Value::from(es.mean)),
        ]),
    ));
    let norms: Vec<f64> = traces.iter().map(|tr| tr.sq_norm[summary.k_used]).collect();
    let l2 = MeanEstimate::from_samples(&norms);
    if let Ok((mean, var)) = sdesolve::linear_oracle_moments(&ctx.model, &spec) {
        let me = MeanEstimate::from_samples(&picard_t);
        let ve = variance_estimate(&picard_t);
        let gap = picard_t
            .iter()
            .zip(&oracle)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let common = detail([
            ("max_pathwise_gap_to_oracle", Value::from(gap)),
            ("l2_norm_mean", Value::from(l2.mean)),
        ]);
        out.push(ctx.report(
            "picard_oracle_mean",
            &case,
            t,
            Mode::Equality,
            me.mean,
            me.std_error,
            mean,
            n,
            m,
            common.clone(),
        ));
        out.push(ctx.report(
            "picard_oracle_variance",
            &case,
            t,
            Mode::Equality,
            ve.mean,
            ve.std_error,
            var,
            n,
            m,
            common,
        ));
    }
    Ok(out)
}

/// `max_(k≥2) δ_k / envelope_k`; zero when the iteration is exact.
fn envelope_excess(c: &sdesolve::ContractionReport) -> f64 {
    c.deltas
        .iter()
        .zip(&c.envelope)
        .skip(2)
        .map(|(d, e)| if *d == 0.0 { 0.0 } else { d / e })
        .fold(0.0, f64::max)
}

fn gronwall(ctx: &Ctx) -> Result<Vec<ExperimentReport>> {
    let cfg = ctx.cfg;
    let spec = cfg
        .sde
        .clone()
        .unwrap_or_else(|| ExperimentConfig::default_sde(cfg.horizon));
    let n = cfg.n_paths.min(GRONWALL_PATHS);
    let sampler = Sampler::new(&ctx.model, ctx.grid, GeneratorMethod::MSynthesis)?;
    let driver = sampler.sample(cfg.seed, 0..n as u64, false);
    let opts = PicardOptions {
        k_max: 20,
        tol: 1e-10,
    };
    let shifted = match spec.initial {
        InitialDist::Normal { mean, sd } => InitialDist::Normal {
            mean: mean + 1.0,
            sd,
        },
        InitialDist::Const(c) => InitialDist::Const(c + 1.0),
    };
    let rep = sdesolve::gronwall_experiment(&ctx.model, &spec, &driver, &shifted, true, &opts)?;
    let (idx, worst) = rep
        .w
        .iter()
        .zip(&rep.bound)
        .map(|(w, b)| w / b)
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, r)| if r > acc.1 { (i, r) } else { acc },
        );
    let t = spec.horizon;
    let m = GeneratorMethod::MSynthesis;
    let case = spec.fingerprint();
    let mut out = vec![ctx.report(
        "gronwall",
        &case,
        t,
        Mode::UpperBound,
        worst,
        rep.w_se[idx] / rep.bound[idx],
        1.0,
        n,
        m,
        detail([
            ("node_passes", Value::from(rep.pass)),
            ("w_terminal", Value::from(*rep.w.last().unwrap())),
            ("bound_terminal", Value::from(*rep.bound.last().unwrap())),
            ("initial_gap", Value::from(rep.initial_gap)),
        ]),
    )];
    let same =
        sdesolve::gronwall_experiment(&ctx.model, &spec, &driver, &spec.initial, true, &opts)?;
    let max_w = same.w.iter().copied().fold(0.0, f64::max);
    out.push(ctx.report(
        "gronwall_identical",
        &case,
        t,
        Mode::Equality,
        max_w,
        0.0,
        0.0,
        n,
        m,
        BTreeMap::new(),
    ));
    Ok(out)
}

/// JSON array of reports.
pub fn write_json<W: Write>(reports: &[ExperimentReport], mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, reports).map_err(|e| FwnError::Io(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub const CSV_HEADER: &str =
    "name,H,estimate,se,target,mode,pass,seed,verdict,case,t,n_paths,nodes,T,method,margin,wall_time";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Flat CSV, one row per report.
pub fn write_csv<W: Write>(reports: &[ExperimentReport], mut w: W) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        let mode = match r.mode {
            Mode::Equality => "equality",
            Mode::UpperBound => "upper_bound",
        };
        let verdict = match r.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        };
        let wall = r.wall_time.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.name),
            r.hurst,
            r.estimate,
            r.std_error,
            r.target,
            mode,
            r.pass,
            r.seed,
            verdict,
            csv_field(&r.case),
            r.t,
            r.n_paths,
            r.nodes,
            r.horizon,
            r.method,
            r.margin,
            wall
        )?;
    }
    Ok(())
}
