//! Command-line front end: `gen`, `solve`, `verify` and `report`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use fwn::fbmgen::{GeneratorMethod, Sampler, TimeGrid};
use fwn::mcharness::{self, ExperimentConfig, ExperimentReport, Verdict};
use fwn::sdesolve::{self, PicardOptions, SdeSpec, SolveMethod, SolveResult};
use fwn::{FwnError, HurstModel};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] FwnError),
    #[error("{failed} of {total} checks did not pass")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    /// 0 success, 1 failed checks, 2 usage or configuration, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed { .. } => 1,
            CliError::Core(e) => match e {
                FwnError::Numeric { .. }
                | FwnError::Accuracy { .. }
                | FwnError::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "fwn",
    version,
    about = "Fractional white noise: fBm paths, WIS integrals, SDEs and verification"
)]
pub struct Cli {
    /// JSON file with default values for the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads, 0 for automatic (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample fBm paths (with the coupled Brownian motion for `m_synthesis`).
    Gen(GenArgs),
    /// Solve a fractional SDE described by a JSON file.
    Solve(SolveArgs),
    /// Run named verification experiments.
    Verify(VerifyArgs),
    /// Summarize a JSON report produced by `verify`.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct Common {
    #[arg(long)]
    pub hurst: Option<f64>,
    /// Horizon T.
    #[arg(long = "T")]
    pub horizon: Option<f64>,
    /// Grid nodes, 2^k + 1.
    #[arg(long = "n")]
    pub nodes: Option<usize>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long, env = "FWN_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// cholesky, circulant or m_synthesis.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub common: Common,
    /// SDE description (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// picard or euler.
    #[arg(long)]
    pub method: Option<String>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    /// Experiment name or `all`.
    #[arg(long, default_value = "all")]
    pub experiment: String,
    /// Generator for the fBm-law experiments.
    #[arg(long)]
    pub method: Option<String>,
    /// SDE for the picard and gronwall experiments.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Paths per generated chunk.
    #[arg(long)]
    pub chunk: Option<usize>,
    /// Record wall time in reports (breaks byte-identical reruns).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// JSON report from `verify`.
    pub input: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    #[value(alias = "binary")]
    Bin,
}

/// Defaults read from `--config`; command-line flags take precedence.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub hurst: Option<f64>,
    #[serde(rename = "T")]
    pub horizon: Option<f64>,
    #[serde(rename = "n")]
    pub nodes: Option<usize>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub method: Option<String>,
    pub threads: Option<usize>,
    pub chunk: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FwnError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| FwnError::Config(format!("{}: {e}", path.display())).into())
    }
}

/// Fully resolved shared settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub hurst: f64,
    pub horizon: f64,
    pub nodes: usize,
    pub paths: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(common: &Common, file: &FileConfig, default_paths: usize) -> CliResult<Self> {
        let cfg = Self {
            hurst: common.hurst.or(file.hurst).unwrap_or(0.75),
            horizon: common.horizon.or(file.horizon).unwrap_or(1.0),
            nodes: common.nodes.or(file.nodes).unwrap_or(1025),
            paths: common.paths.or(file.paths).unwrap_or(default_paths),
            seed: common.seed.or(file.seed).unwrap_or(1),
            out: common.out.clone(),
        };
        HurstModel::new(cfg.hurst)?;
        TimeGrid::new(cfg.horizon, cfg.nodes)?;
        if cfg.paths == 0 {
            return Err(FwnError::Config("--paths must be positive".into()).into());
        }
        Ok(cfg)
    }

    pub fn grid(&self) -> CliResult<TimeGrid> {
        Ok(TimeGrid::new(self.horizon, self.nodes)?)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic<F>(path: &Path, body: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> fwn::Result<()>,
{
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| FwnError::Config(format!("bad output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| -> fwn::Result<()> {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.into_inner()
            .map_err(|e| FwnError::Io(e.to_string()))?
            .sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn emit<F>(out: Option<&Path>, body: F) -> CliResult<()>
where
    F: FnOnce(&mut dyn Write) -> fwn::Result<()>,
{
    match out {
        Some(p) => write_atomic(p, body),
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
            lock.flush().map_err(FwnError::from)?;
            Ok(())
        }
    }
}

pub fn load_spec(path: &Path) -> CliResult<SdeSpec> {
    let text = fs::read_to_string(path)
        .map_err(|e| FwnError::Config(format!("{}: {e}", path.display())))?;
    Ok(SdeSpec::from_json(&text)?)
}

fn parse_generator(s: Option<&str>, default: GeneratorMethod) -> CliResult<GeneratorMethod> {
    match s {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| FwnError::Usage(format!("unknown generator '{s}'")).into()),
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let threads = cli.threads.or(file.threads);
    match threads {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| FwnError::Config(e.to_string()))?;
            pool.install(|| dispatch(&cli.command, &file))
        }
        _ => dispatch(&cli.command, &file),
    }
}

fn dispatch(command: &Command, file: &FileConfig) -> CliResult<()> {
    match command {
        Command::Gen(a) => gen(a, file),
        Command::Solve(a) => solve(a, file),
        Command::Verify(a) => verify(a, file),
        Command::Report(a) => report(a),
    }
}

fn gen(a: &GenArgs, file: &FileConfig) -> CliResult<()> {
    let cfg = RunConfig::resolve(&a.common, file, 1000)?;
    let method = parse_generator(
        a.method.as_deref().or(file.method.as_deref()),
        GeneratorMethod::Circulant,
    )?;
    let format = a.format.unwrap_or(Format::Csv);
    if format == Format::Json {
        return Err(FwnError::Usage("gen writes csv or bin".into()).into());
    }
    let model = HurstModel::new(cfg.hurst)?;
    let sampler = Sampler::new(&model, cfg.grid()?, method)?;
    let ens = sampler.sample(
        cfg.seed,
        0..cfg.paths as u64,
        method == GeneratorMethod::MSynthesis,
    );
    emit(cfg.out.as_deref(), |w| match format {
        Format::Bin => ens.write_binary(w),
        _ => ens.write_csv(w),
    })
}

/// JSON sidecar written next to a solution CSV.
#[derive(Debug, Serialize, Deserialize)]
pub struct SolveSidecar {
    pub spec: sdesolve::SdeSpecFile,
    pub hurst: f64,
    pub seed: u64,
    pub method: SolveMethod,
    pub n_paths: usize,
    pub nodes: usize,
    pub iterates_delta: Vec<f64>,
    pub k_used: usize,
    pub converged: bool,
    pub residual: Option<f64>,
}

fn write_solution(res: &SolveResult, grid: &TimeGrid, w: &mut dyn Write) -> fwn::Result<()> {
    writeln!(w, "path,node,t,x")?;
    for p in 0..res.n_paths {
        for (i, x) in res.path(p).iter().enumerate() {
            writeln!(w, "{p},{i},{},{x}", grid.time(i))?;
        }
    }
    Ok(())
}

fn solve(a: &SolveArgs, file: &FileConfig) -> CliResult<()> {
    let spec = load_spec(&a.spec)?;
    let mut common = Common {
        horizon: Some(spec.horizon),
        ..Common::default()
    };
    common.hurst = a.common.hurst;
    common.nodes = a.common.nodes;
    common.paths = a.common.paths;
    common.seed = a.common.seed;
    common.out = a.common.out.clone();
    if let Some(t) = a.common.horizon {
        if (t - spec.horizon).abs() > 1e-12 * spec.horizon {
            return Err(
                FwnError::Config(format!("--T {t} differs from spec T {}", spec.horizon)).into(),
            );
        }
    }
    let cfg = RunConfig::resolve(&common, file, 1000)?;
    let method = match a.method.as_deref().unwrap_or("picard") {
        "picard" => SolveMethod::Picard,
        "euler" => SolveMethod::Euler,
        s => return Err(FwnError::Usage(format!("unknown solver '{s}'")).into()),
    };
    let model = HurstModel::new(cfg.hurst)?;
    let grid = cfg.grid()?;
    let driver = Sampler::new(&model, grid, GeneratorMethod::MSynthesis)?.sample(
        cfg.seed,
        0..cfg.paths as u64,
        true,
    );
    let res = match method {
        SolveMethod::Picard => {
            sdesolve::picard_solve(&model, &spec, &driver, &PicardOptions::default())?
        }
        SolveMethod::Euler => sdesolve::euler_solve(&model, &spec, &driver)?,
    };
    let sidecar = SolveSidecar {
        spec: spec.to_file(),
        hurst: cfg.hurst,
        seed: cfg.seed,
        method,
        n_paths: res.n_paths,
        nodes: res.nodes,
        iterates_delta: res.iterates_delta.clone(),
        k_used: res.k_used,
        converged: res.converged,
        residual: res.residual,
    };
    emit(cfg.out.as_deref(), |w| write_solution(&res, &grid, w))?;
    match &cfg.out {
        Some(p) => write_atomic(&p.with_extension("json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &sidecar)
                .map_err(|e| FwnError::Io(e.to_string()))?;
            writeln!(w)?;
            Ok(())
        }),
        None => {
            let text = serde_json::to_string(&sidecar).map_err(|e| FwnError::Io(e.to_string()))?;
            eprintln!("{text}");
            Ok(())
        }
    }
}

fn verify(a: &VerifyArgs, file: &FileConfig) -> CliResult<()> {
    let cfg = RunConfig::resolve(&a.common, file, 100_000)?;
    let experiments = mcharness::parse_selection(&a.experiment)?;
    let sde = a.spec.as_deref().map(load_spec).transpose()?;
    let exp = ExperimentConfig {
        hurst: cfg.hurst,
        horizon: cfg.horizon,
        nodes: cfg.nodes,
        n_paths: cfg.paths,
        seed: cfg.seed,
        method: parse_generator(
            a.method.as_deref().or(file.method.as_deref()),
            GeneratorMethod::Circulant,
        )?,
        sde,
        chunk: a.chunk.or(file.chunk).unwrap_or(8192),
        timing: a.timing,
        ..ExperimentConfig::default()
    };
    let format = a.format.unwrap_or(Format::Json);
    if format == Format::Bin {
        return Err(FwnError::Usage("verify writes json or csv".into()).into());
    }
    let reports = mcharness::run_suite(&experiments, &exp)?;
    emit(cfg.out.as_deref(), |w| match format {
        Format::Csv => mcharness::write_csv(&reports, w),
        _ => mcharness::write_json(&reports, w),
    })?;
    check_verdicts(&reports)
}

fn check_verdicts(reports: &[ExperimentReport]) -> CliResult<()> {
    let failed = reports
        .iter()
        .filter(|r| r.verdict != Verdict::Pass)
        .count();
    if failed > 0 {
        Err(CliError::ChecksFailed {
            failed,
            total: reports.len(),
        })
    } else {
        Ok(())
    }
}

/// One summary line per report.
pub fn summarize(reports: &[ExperimentReport]) -> String {
    let mut s = String::new();
    for r in reports {
        let verdict = match r.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        };
        s.push_str(&format!(
            "{verdict:<12} {:<22} {:<28} H={} t={} estimate={:.6e} se={:.2e} target={:.6e}\n",
            r.name, r.case, r.hurst, r.t, r.estimate, r.std_error, r.target
        ));
    }
    s
}

fn report(a: &ReportArgs) -> CliResult<()> {
    let text = fs::read_to_string(&a.input)
        .map_err(|e| FwnError::Config(format!("{}: {e}", a.input.display())))?;
    let reports: Vec<ExperimentReport> = serde_json::from_str(&text)
        .map_err(|e| FwnError::Config(format!("{}: {e}", a.input.display())))?;
    print!("{}", summarize(&reports));
    check_verdicts(&reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        let core = |e: FwnError| CliError::Core(e).exit_code();
        assert_eq!(core(FwnError::Usage("x".into())), 2);
        assert_eq!(core(FwnError::Config("x".into())), 2);
        assert_eq!(core(FwnError::Domain("x".into())), 2);
        assert_eq!(
            core(FwnError::Numeric {
                message: "x".into(),
                value: -1.0
            }),
            3
        );
        assert_eq!(
            core(FwnError::Accuracy {
                estimate: 1.0,
                tol: 0.1,
                tail: 0.0
            }),
            3
        );
        assert_eq!(
            CliError::ChecksFailed {
                failed: 1,
                total: 2
            }
            .exit_code(),
            1
        );
    }

    #[test]
    fn flags_take_precedence_over_file() {
        let file = FileConfig {
            hurst: Some(0.6),
            nodes: Some(129),
            seed: Some(4),
            ..FileConfig::default()
        };
        let common = Common {
            seed: Some(8),
            ..Common::default()
        };
        let cfg = RunConfig::resolve(&common, &file, 10).unwrap();
        assert_eq!(
            (cfg.hurst, cfg.nodes, cfg.seed, cfg.paths),
            (0.6, 129, 8, 10)
        );
    }

    #[test]
    fn invalid_values_are_rejected_before_running() {
        let bad = Common {
            hurst: Some(0.4),
            ..Common::default()
        };
        assert_eq!(
            RunConfig::resolve(&bad, &FileConfig::default(), 1)
                .unwrap_err()
                .exit_code(),
            2
        );
        let bad = Common {
            nodes: Some(100),
            ..Common::default()
        };
        assert!(RunConfig::resolve(&bad, &FileConfig::default(), 1).is_err());
    }
}
