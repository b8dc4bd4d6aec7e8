//! Configuration-driven command-line front end.
//!
//! Exit codes: `0` success, `1` model-level failure (admissibility,
//! divergence, quadrature or simulation failure), `2` usage or parse error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::affine_params::{AffineParams, GammaSpec, JumpAtom, KernelTerm, ValidationReport};
use crate::error::{Error, Result};
use crate::operator_space::RealOp;
use crate::pricing::{
    price_call_fourier_detailed, robustness_study, write_robustness_csv, MarketSpec, Payoff, QuadSpec,
    RiccatiConfig, RobustnessRow,
};
use crate::riccati::{galerkin_convergence, solve_covariance_riccati, write_convergence_csv, ConvergenceRow};
use crate::simulation::{simulate_joint, write_paths_csv, write_paths_jsonl, Record, SimConfig};
use crate::spectral_basis::{CurveCoeffs, EigenBasis, SpaceConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MODEL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "heatvol", version, about = "Heat-modulated affine stochastic covariance models")]
pub struct Cli {
    /// Model configuration (TOML).
    #[arg(long, short = 'c', global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on this value.
    #[arg(long, env = "HEATVOL_THREADS", global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Randomized admissibility report.
    Validate {
        #[arg(long, default_value_t = 256)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Covariance Riccati trajectory at a Galerkin rank.
    Riccati {
        /// Initial value `u2` as a CSV matrix; defaults to `[riccati].u2` or zero.
        #[arg(long)]
        u2_file: Option<PathBuf>,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fourier price of calls on a flow forward.
    Price {
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        tau1: Option<f64>,
        #[arg(long)]
        tau2: Option<f64>,
        /// One strike or a comma-separated ladder.
        #[arg(long, value_delimiter = ',')]
        strike: Vec<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lambda_max: Option<f64>,
        #[arg(long)]
        n_nodes: Option<usize>,
        #[arg(long, value_enum)]
        payoff: Option<PayoffArg>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo paths of the joint curve and covariance.
    Simulate {
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, value_enum)]
        record: Option<RecordArg>,
        #[arg(long)]
        no_psd_repair: bool,
        /// `.jsonl` selects JSON lines, anything else CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Error against the largest rank over a list of ranks.
    Converge {
        #[arg(long, value_delimiter = ',', default_values_t = vec![4, 8, 16, 32])]
        ranks: Vec<usize>,
        #[arg(long, value_enum, default_value_t = ConvergeMode::Riccati)]
        mode: ConvergeMode,
        #[arg(long)]
        u2_file: Option<PathBuf>,
        #[arg(long = "T")]
        horizon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PayoffArg {
    Arithmetic,
    Exponential,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RecordArg {
    Full,
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvergeMode {
    Riccati,
    Price,
}

/// Failure of a command together with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    fn model(message: impl Into<String>) -> Self {
        Self { code: EXIT_MODEL, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Domain(_)
            | Error::Shape(_)
            | Error::Input(_)
            | Error::Parse(_)
            | Error::Damping(_)
            | Error::OffGrid(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => EXIT_USAGE,
            Error::Numeric(_)
            | Error::NotPsd { .. }
            | Error::IllPosedProjection(_)
            | Error::Divergence { .. }
            | Error::ModelClass(_)
            | Error::Quadrature(_)
            | Error::Simulation(_) => EXIT_MODEL,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` and runs the command, returning the exit code. Diagnostics
/// go to stderr, reports to stdout.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let argv = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, argv) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("heatvol: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: &Cli, argv: Vec<String>) -> CliResult<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::usage(format!("cannot build thread pool: {e}")))?;
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::usage("--config is required"))?;
    let config = ModelConfig::load(config_path)?;
    let started = Instant::now();
    let outcome = pool.install(|| dispatch(cli, &config))?;
    if let Some(out) = &outcome.out {
        let manifest = RunManifest {
            config_path: config_path.display().to_string(),
            command: command_name(&cli.command).into(),
            args: argv,
            seed: outcome.seed,
            output_dir: out
                .parent()
                .map(|p| p.display().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| ".".into()),
            output: out.display().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_unix_s: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64() - started.elapsed().as_secs_f64())
                .unwrap_or(0.0),
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        let path = manifest_path(out);
        let f = File::create(&path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        serde_json::to_writer_pretty(f, &manifest).map_err(Error::from)?;
    }
    match outcome.failure {
        Some(msg) => Err(CliError::model(msg)),
        None => Ok(()),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate { .. } => "validate",
        Command::Riccati { .. } => "riccati",
        Command::Price { .. } => "price",
        Command::Simulate { .. } => "simulate",
        Command::Converge { .. } => "converge",
    }
}

/// `<out>.manifest.json`.
pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Record written next to every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_path: String,
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub output_dir: String,
    pub output: String,
    pub tool_version: String,
    pub started_unix_s: f64,
    pub wall_clock_s: f64,
}

struct Outcome {
    out: Option<PathBuf>,
    seed: Option<u64>,
    /// Model-level failure reported after the outputs were written.
    failure: Option<String>,
}

fn dispatch(cli: &Cli, config: &ModelConfig) -> CliResult<Outcome> {
    match &cli.command {
        Command::Validate { trials, seed, out } => cmd_validate(config, *trials, *seed, out.as_deref()),
        Command::Riccati { u2_file, horizon, steps, rank, out } => {
            let params = config.admissible_params()?;
            let sec = config.riccati.clone().unwrap_or_default();
            let t = horizon.or(sec.horizon).ok_or_else(|| CliError::usage("--T or [riccati].horizon is required"))?;
            let d = rank.or(sec.rank).unwrap_or(params.dim());
            check_rank(d, params.dim())?;
            let u2 = config.u2(u2_file.as_deref(), params.dim(), RealOp::zeros(params.dim()))?;
            let steps = steps.or(sec.steps).unwrap_or_else(|| crate::riccati::default_steps(params.basis(), d, t));
            let traj = solve_covariance_riccati(&params, &u2, t, steps, d)?;
            traj.write_csv(out)?;
            println!(
                "{}",
                serde_json::json!({"rank": d, "steps": steps, "T": t, "phi": traj.phi.last(), "out": out})
            );
            Ok(Outcome { out: Some(out.clone()), seed: None, failure: None })
        }
        Command::Price { t, tau1, tau2, strike, eta, lambda_max, n_nodes, payoff, rank, steps, out } => {
            let params = config.admissible_params()?;
            let m = config.market.clone().unwrap_or_default();
            let pick = |flag: Option<f64>, cfg: Option<f64>, name: &str| {
                flag.or(cfg).ok_or_else(|| CliError::usage(format!("--{name} or [market].{name} is required")))
            };
            let t = pick(*t, m.t, "t")?;
            let tau1 = pick(*tau1, m.tau1, "tau1")?;
            let tau2 = pick(*tau2, m.tau2, "tau2")?;
            let eta = eta.or(m.eta).unwrap_or(1.75);
            let strikes = if strike.is_empty() { m.strikes() } else { strike.clone() };
            if strikes.is_empty() {
                return Err(CliError::usage("--strike or [market].strike is required"));
            }
            let mut quad = config.quad.unwrap_or_default();
            if lambda_max.is_some() {
                quad.lambda_max = *lambda_max;
            }
            if let Some(n) = n_nodes {
                quad.n_nodes = *n;
            }
            if let Some(p) = payoff {
                quad.payoff = match p {
                    PayoffArg::Arithmetic => Payoff::Arithmetic,
                    PayoffArg::Exponential => Payoff::Exponential,
                };
            }
            let sec = config.riccati.clone().unwrap_or_default();
            let rcfg = RiccatiConfig { rank: rank.or(sec.rank), steps: *steps };
            if let Some(d) = rcfg.rank {
                check_rank(d, params.dim())?;
            }
            let (f0, x0) = config.initial_state(params.basis())?;
            let mut results = Vec::with_capacity(strikes.len());
            for &k in &strikes {
                let market = MarketSpec::new(f0.clone(), x0.clone(), t, tau1, tau2, k, eta);
                let p = price_call_fourier_detailed(&params, &market, &quad, &rcfg)?;
                results.push(PriceRecord { strike: k, eta, t, tau1, tau2, result: p });
            }
            let text = serde_json::to_string_pretty(&results).map_err(Error::from)?;
            println!("{text}");
            if let Some(out) = out {
                std::fs::write(out, text + "\n").map_err(Error::from)?;
            }
            Ok(Outcome { out: out.clone(), seed: None, failure: None })
        }
        Command::Simulate { paths, dt, horizon, seed, rank, record, no_psd_repair, out } => {
            let params = config.admissible_params()?;
            let sec = config.sim.clone().unwrap_or_default();
            let t = horizon.or(sec.horizon).ok_or_else(|| CliError::usage("--T or [sim].horizon is required"))?;
            let dt = dt.or(sec.dt).ok_or_else(|| CliError::usage("--dt or [sim].dt is required"))?;
            let n_paths = paths.or(sec.paths).unwrap_or(1000);
            let seed = seed.or(sec.seed).unwrap_or(0);
            let d = rank.or(sec.rank).unwrap_or(params.dim());
            check_rank(d, params.dim())?;
            let mut cfg = SimConfig::new(t, dt, n_paths, seed, d);
            cfg.psd_repair = !no_psd_repair && sec.psd_repair.unwrap_or(true);
            cfg.record = match record {
                Some(RecordArg::Full) => Record::Full,
                Some(RecordArg::Terminal) => Record::Terminal,
                None => sec.record.unwrap_or_default(),
            };
            let (f0, x0) = config.initial_state(params.basis())?;
            let paths = simulate_joint(&params, &f0, &x0, &cfg)?;
            let file = File::create(out).map_err(Error::from)?;
            let w = BufWriter::new(file);
            if out.extension().is_some_and(|e| e == "jsonl") {
                write_paths_jsonl(w, &paths)?;
            } else {
                write_paths_csv(w, &paths)?;
            }
            let clipped = paths.iter().map(|p| p.clipped_total).sum::<f64>() / paths.len() as f64;
            let jumps = paths.iter().map(|p| p.jump_times.len()).sum::<usize>() as f64 / paths.len() as f64;
            println!(
                "{}",
                serde_json::json!({
                    "paths": n_paths, "steps": cfg.steps(), "seed": seed, "rank": d,
                    "mean_jumps": jumps, "mean_clipped": clipped, "out": out
                })
            );
            Ok(Outcome { out: Some(out.clone()), seed: Some(seed), failure: None })
        }
        Command::Converge { ranks, mode, u2_file, horizon, steps, out } => {
            let params = config.admissible_params()?;
            for &d in ranks {
                check_rank(d, params.dim())?;
            }
            let svg = out.with_extension("svg");
            let summary = match mode {
                ConvergeMode::Riccati => {
                    let sec = config.riccati.clone().unwrap_or_default();
                    let t = horizon.or(sec.horizon).unwrap_or(1.0);
                    let u2 = config.u2(u2_file.as_deref(), params.dim(), RealOp::identity(params.dim()))?;
                    let (rows, k_fit) = galerkin_convergence(&params, &u2, t, steps.or(sec.steps), ranks)?;
                    write_convergence_csv(BufWriter::new(File::create(out).map_err(Error::from)?), &rows)?;
                    write_svg(&svg, "Galerkin error against the reference rank", &riccati_series(&rows, k_fit))?;
                    let bounded = rows.iter().all(|r| r.err <= k_fit * r.c_td * (1.0 + 1e-12) + 1e-300);
                    let monotone = rows.windows(2).all(|w| w[1].err <= w[0].err);
                    serde_json::json!({"mode": "riccati", "k_fit": k_fit, "nonincreasing": monotone,
                        "bounded": bounded, "rows": rows, "out": out, "plot": svg})
                }
                ConvergeMode::Price => {
                    let m = config.market.clone().unwrap_or_default();
                    let need = |v: Option<f64>, name: &str| {
                        v.ok_or_else(|| CliError::usage(format!("[market].{name} is required in price mode")))
                    };
                    let strike = m.strikes().first().copied();
                    let (f0, x0) = config.initial_state(params.basis())?;
                    let market = MarketSpec::new(
                        f0,
                        x0,
                        need(m.t, "t")?,
                        need(m.tau1, "tau1")?,
                        need(m.tau2, "tau2")?,
                        need(strike, "strike")?,
                        m.eta.unwrap_or(1.75),
                    );
                    let rcfg = RiccatiConfig { rank: None, steps: *steps };
                    let rows = robustness_study(&params, &market, &config.quad.unwrap_or_default(), &rcfg, ranks)?;
                    write_robustness_csv(BufWriter::new(File::create(out).map_err(Error::from)?), &rows)?;
                    write_svg(&svg, "Price difference against the reference rank", &price_series(&rows))?;
                    let monotone = rows.windows(2).all(|w| w[1].abs_diff <= w[0].abs_diff);
                    serde_json::json!({"mode": "price", "nonincreasing": monotone, "rows": rows,
                        "out": out, "plot": svg})
                }
            };
            println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
            Ok(Outcome { out: Some(out.clone()), seed: None, failure: None })
        }
    }
}

#[derive(Serialize)]
struct PriceRecord {
    strike: f64,
    eta: f64,
    t: f64,
    tau1: f64,
    tau2: f64,
    #[serde(flatten)]
    result: crate::pricing::FourierPrice,
}

fn check_rank(d: usize, dim: usize) -> CliResult<()> {
    if d == 0 || d > dim {
        return Err(CliError::usage(format!("rank {d} must lie in 1..={dim}")));
    }
    Ok(())
}

fn cmd_validate(config: &ModelConfig, trials: usize, seed: u64, out: Option<&Path>) -> CliResult<Outcome> {
    let params = config.params()?;
    let report = params.validate_admissible(trials, seed);
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    println!("{text}");
    if let Some(out) = out {
        std::fs::write(out, text + "\n").map_err(Error::from)?;
    }
    let failure = (!report.all_passed()).then(|| failed_message(&report));
    Ok(Outcome { out: out.map(Path::to_path_buf), seed: Some(seed), failure })
}

fn failed_message(report: &ValidationReport) -> String {
    let items: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("({}) {} [worst margin {:e}]", c.item, c.description, c.worst_margin))
        .collect();
    format!("parameters are not admissible: {}", items.join("; "))
}

// ---------------------------------------------------------------------------
// configuration

/// Parsed TOML model and experiment configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub space: SpaceConfig,
    #[serde(default)]
    pub drift: Option<MatrixSpec>,
    #[serde(default)]
    pub gamma: Option<GammaConfig>,
    #[serde(default)]
    pub m_atoms: Vec<AtomConfig>,
    #[serde(default)]
    pub mu_atoms: Vec<AtomConfig>,
    #[serde(default)]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub market: Option<MarketConfig>,
    #[serde(default)]
    pub quad: Option<QuadSpec>,
    #[serde(default)]
    pub sim: Option<SimSection>,
    #[serde(default)]
    pub riccati: Option<RiccatiSection>,
    /// Directory that relative file references resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A symmetric matrix given by exactly one of `rows`, `diag`, `outer`
/// (the rank-one `v v^T`) or `file` (headerless CSV), times `scale`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSpec {
    pub rows: Option<Vec<Vec<f64>>>,
    pub diag: Option<Vec<f64>>,
    pub outer: Option<Vec<f64>>,
    pub file: Option<PathBuf>,
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaConfig {
    #[serde(default)]
    pub scalar: f64,
    /// Square factor `G` in `x -> G x G^T`, given by `rows` or `file`.
    pub factor: Option<MatrixSpec>,
    #[serde(default)]
    pub kernel: Vec<KernelConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub zeta: MatrixSpec,
    pub nu: MatrixSpec,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub weight: f64,
    pub jump: MatrixSpec,
    pub direction: Option<MatrixSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub x0: Option<MatrixSpec>,
    pub f0: Option<CurveSpec>,
}

/// Initial curve by coefficients (zero padded), samples or a CSV of
/// `x, value` rows projected onto the basis, or a Gaussian hump
/// `level + amplitude exp(-((x - center)/width)^2)` sampled and projected.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveSpec {
    pub coeffs: Option<Vec<f64>>,
    pub samples: Option<Vec<[f64; 2]>>,
    pub file: Option<PathBuf>,
    pub hump: Option<Hump>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hump {
    #[serde(default)]
    pub level: f64,
    pub amplitude: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketConfig {
    pub t: Option<f64>,
    pub tau1: Option<f64>,
    pub tau2: Option<f64>,
    pub strike: Option<StrikeSpec>,
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StrikeSpec {
    One(f64),
    Ladder(Vec<f64>),
}

impl MarketConfig {
    fn strikes(&self) -> Vec<f64> {
        match &self.strike {
            Some(StrikeSpec::One(k)) => vec![*k],
            Some(StrikeSpec::Ladder(ks)) => ks.clone(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub horizon: Option<f64>,
    pub dt: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub rank: Option<usize>,
    pub psd_repair: Option<bool>,
    pub record: Option<Record>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiSection {
    pub horizon: Option<f64>,
    pub steps: Option<usize>,
    pub rank: Option<usize>,
    pub u2: Option<MatrixSpec>,
}

impl ModelConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn basis(&self) -> Result<EigenBasis> {
        EigenBasis::new(self.space)
    }

    /// Parameters with shapes checked but admissibility not enforced.
    pub fn params(&self) -> Result<AffineParams> {
        let basis = self.basis()?;
        let d = basis.rank();
        let drift = match &self.drift {
            Some(m) => self.matrix(m, d, "drift")?,
            None => RealOp::zeros(d),
        };
        let gamma = match &self.gamma {
            Some(g) => GammaSpec {
                gamma_scalar: g.scalar,
                gamma_factor: g
                    .factor
                    .as_ref()
                    .map(|f| self.raw_matrix(f, d, "gamma.factor"))
                    .transpose()?,
                kernel_terms: g
                    .kernel
                    .iter()
                    .map(|k| {
                        Ok(KernelTerm {
                            zeta: self.matrix(&k.zeta, d, "gamma.kernel.zeta")?,
                            nu: self.matrix(&k.nu, d, "gamma.kernel.nu")?,
                        })
                    })
                    .collect::<Result<_>>()?,
            },
            None => GammaSpec::default(),
        };
        let m_atoms = self
            .m_atoms
            .iter()
            .map(|a| Ok(JumpAtom::new(a.weight, self.matrix(&a.jump, d, "m_atoms.jump")?)))
            .collect::<Result<_>>()?;
        let mu_atoms = self
            .mu_atoms
            .iter()
            .map(|a| {
                let jump = self.matrix(&a.jump, d, "mu_atoms.jump")?;
                let dir = a
                    .direction
                    .as_ref()
                    .ok_or_else(|| Error::Config("mu_atoms need a direction".into()))?;
                Ok(JumpAtom::with_direction(a.weight, jump, self.matrix(dir, d, "mu_atoms.direction")?))
            })
            .collect::<Result<_>>()?;
        AffineParams::new_unchecked_drift(basis, drift, gamma, m_atoms, mu_atoms)
    }

    /// Parameters that passed the admissibility report.
    fn admissible_params(&self) -> CliResult<AffineParams> {
        let params = self.params()?;
        let report = params.validate_admissible(64, 0);
        if !report.all_passed() {
            return Err(CliError::model(failed_message(&report)));
        }
        Ok(params)
    }

    /// `(f0, x0)`; both default to zero.
    pub fn initial_state(&self, basis: &EigenBasis) -> Result<(CurveCoeffs, RealOp)> {
        let d = basis.rank();
        let init = self.initial.clone().unwrap_or_default();
        let x0 = match &init.x0 {
            Some(m) => self.matrix(m, d, "initial.x0")?,
            None => RealOp::zeros(d),
        };
        if !x0.is_psd() {
            return Err(Error::Config("initial.x0 must be PSD".into()));
        }
        let f0 = match &init.f0 {
            Some(c) => self.curve(c, basis)?,
            None => CurveCoeffs::zeros(d),
        };
        Ok((f0, x0))
    }

    fn curve(&self, c: &CurveSpec, basis: &EigenBasis) -> Result<CurveCoeffs> {
        let given = [c.coeffs.is_some(), c.samples.is_some(), c.file.is_some(), c.hump.is_some()];
        if given.iter().filter(|&&g| g).count() != 1 {
            return Err(Error::Config("initial.f0 needs exactly one of coeffs, samples, file, hump".into()));
        }
        let d = basis.rank();
        if let Some(v) = &c.coeffs {
            if v.len() > d {
                return Err(Error::Shape(format!("initial.f0 has {} coefficients, basis rank is {d}", v.len())));
            }
            let mut out = vec![0.0; d];
            out[..v.len()].copy_from_slice(v);
            return Ok(CurveCoeffs::from_vec(out));
        }
        let samples: Vec<(f64, f64)> = if let Some(s) = &c.samples {
            s.iter().map(|p| (p[0], p[1])).collect()
        } else if let Some(f) = &c.file {
            read_csv_rows(&self.base_dir.join(f))?
                .into_iter()
                .map(|r| match r.as_slice() {
                    [x, v] => Ok((*x, *v)),
                    _ => Err(Error::Parse("curve file rows need two columns x, value".into())),
                })
                .collect::<Result<_>>()?
        } else {
            let h = c.hump.unwrap();
            let n = 4 * d + 8;
            let theta = basis.theta_max();
            (1..=n)
                .map(|i| {
                    let x = theta * i as f64 / (n + 1) as f64;
                    let z = (x - h.center) / h.width;
                    (x, h.level + h.amplitude * (-z * z).exp())
                })
                .collect()
        };
        basis.project_curve(&samples)
    }

    /// `u2` from a CSV file, the `[riccati].u2` entry, or `fallback`.
    fn u2(&self, file: Option<&Path>, d: usize, fallback: RealOp) -> Result<RealOp> {
        if let Some(f) = file {
            let spec = MatrixSpec { file: Some(f.to_path_buf()), ..Default::default() };
            // command-line paths resolve against the working directory
            let m = matrix_from_spec(&spec, d, "u2", Path::new(""))?;
            return RealOp::new(m);
        }
        match self.riccati.as_ref().and_then(|r| r.u2.as_ref()) {
            Some(m) => self.matrix(m, d, "riccati.u2"),
            None => Ok(fallback),
        }
    }

    fn matrix(&self, spec: &MatrixSpec, d: usize, name: &str) -> Result<RealOp> {
        let m = self.raw_matrix(spec, d, name)?;
        RealOp::new(m).map_err(|e| Error::Config(format!("{name}: {e}")))
    }

    fn raw_matrix(&self, spec: &MatrixSpec, d: usize, name: &str) -> Result<DMatrix<f64>> {
        matrix_from_spec(spec, d, name, &self.base_dir)
    }
}

fn matrix_from_spec(spec: &MatrixSpec, d: usize, name: &str, base: &Path) -> Result<DMatrix<f64>> {
    let given = [spec.rows.is_some(), spec.diag.is_some(), spec.outer.is_some(), spec.file.is_some()];
    if given.iter().filter(|&&g| g).count() != 1 {
        return Err(Error::Config(format!("{name} needs exactly one of rows, diag, outer, file")));
    }
    let from_rows = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>> {
        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape(format!("{name} must be {d}x{d}")));
        }
        Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    };
    let vector = |v: &[f64]| -> Result<DVector<f64>> {
        if v.len() > d {
            return Err(Error::Shape(format!("{name} has {} entries, dimension is {d}", v.len())));
        }
        Ok(DVector::from_fn(d, |i, _| v.get(i).copied().unwrap_or(0.0)))
    };
    let m = if let Some(rows) = &spec.rows {
        from_rows(rows)?
    } else if let Some(v) = &spec.diag {
        DMatrix::from_diagonal(&vector(v)?)
    } else if let Some(v) = &spec.outer {
        let v = vector(v)?;
        &v * v.transpose()
    } else {
        from_rows(&read_csv_rows(&base.join(spec.file.as_ref().unwrap()))?)?
    };
    let s = spec.scale.unwrap_or(1.0);
    if !s.is_finite() {
        return Err(Error::Config(format!("{name}.scale must be finite")));
    }
    Ok(m * s)
}

fn read_csv_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    r.records()
        .map(|rec| {
            rec?.iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("{}: {f:?}: {e}", path.display())))
                })
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// plots

struct Series {
    label: String,
    color: &'static str,
    points: Vec<(f64, f64)>,
}

fn riccati_series(rows: &[ConvergenceRow], k_fit: f64) -> Vec<Series> {
    let pts = |f: &dyn Fn(&ConvergenceRow) -> f64| rows.iter().map(|r| (r.d as f64, f(r))).collect();
    vec![
        Series { label: "err(d)".into(), color: "#1f77b4", points: pts(&|r| r.err) },
        Series { label: format!("K C(d), K = {k_fit:.3e}"), color: "#d62728", points: pts(&|r| k_fit * r.c_td) },
    ]
}

fn price_series(rows: &[RobustnessRow]) -> Vec<Series> {
    let pts = |f: &dyn Fn(&RobustnessRow) -> f64| rows.iter().map(|r| (r.d as f64, f(r))).collect();
    vec![
        Series { label: "|price(d) - price(ref)|".into(), color: "#1f77b4", points: pts(&|r| r.abs_diff) },
        Series { label: "c proxy".into(), color: "#d62728", points: pts(&|r| r.c_proxy) },
    ]
}

/// Log-log line plot. Nonpositive values are dropped.
fn write_svg(path: &Path, title: &str, series: &[Series]) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 60.0;
    let visible = |p: &&(f64, f64)| p.0 > 0.0 && p.1 > 0.0 && p.1.is_finite();
    let all: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|s| s.points.iter().filter(visible).map(|&(x, y)| (x.log10(), y.log10())))
        .collect();
    let (x0, x1, y0, y1) = if all.is_empty() {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let fold = |f: fn(f64, f64) -> f64, init: f64, sel: fn(&(f64, f64)) -> f64| {
            all.iter().map(sel).fold(init, f)
        };
        let (mut x0, mut x1) = (fold(f64::min, f64::INFINITY, |p| p.0), fold(f64::max, f64::NEG_INFINITY, |p| p.0));
        let (mut y0, mut y1) = (fold(f64::min, f64::INFINITY, |p| p.1), fold(f64::max, f64::NEG_INFINITY, |p| p.1));
        if x1 - x0 < 1e-9 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y1 - y0 < 1e-9 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        (x0, x1, y0.floor(), y1.ceil())
    };
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    s.push_str(&format!("<text x=\"{}\" y=\"24\" text-anchor=\"middle\">{}</text>\n", W / 2.0, escape(title)));
    s.push_str(&format!(
        "<path d=\"M{M} {M} V{} H{}\" stroke=\"black\" fill=\"none\"/>\n",
        H - M,
        W - M
    ));
    let mut e = y0 as i64;
    while e as f64 <= y1 {
        let y = sy(e as f64);
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">1e{e}</text>\n",
            M - 6.0,
            y + 4.0
        ));
        e += 1;
    }
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|&x| x > 0.0).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{x}</text>\n",
            sx(x.log10()),
            H - M + 18.0
        ));
    }
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">rank d</text>\n", W / 2.0, H - 12.0));
    for (k, ser) in series.iter().enumerate() {
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(visible)
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x.log10()), sy(y.log10())))
            .collect();
        if !pts.is_empty() {
            s.push_str(&format!(
                "<polyline points=\"{}\" stroke=\"{}\" stroke-width=\"2\" fill=\"none\"/>\n",
                pts.join(" "),
                ser.color
            ));
        }
        let ly = M + 16.0 * k as f64;
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{ly}\" fill=\"{}\" text-anchor=\"end\">{}</text>\n",
            W - M,
            ser.color,
            escape(&ser.label)
        ));
    }
    s.push_str("</svg>\n");
    let mut f = File::create(path)?;
    f.write_all(s.as_bytes())?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    const BNS: &str = r#"
[space]
theta_max = 2.0
rank = 4

[drift]
diag = [0.3, 0.2, 0.1, 0.1]

[[m_atoms]]
weight = 1.0
jump = { outer = [1.0, 0.5], scale = 0.1 }

[initial]
x0 = { diag = [0.2, 0.1] }
f0 = { coeffs = [1.0, 0.2] }
"#;

    #[test]
    fn parses_matrix_specs() {
        let cfg = ModelConfig::parse(BNS).unwrap();
        let p = cfg.params().unwrap();
        assert_eq!(p.dim(), 4);
        assert!((p.m_atoms()[0].jump.get(0, 1) - 0.05).abs() < 1e-15);
        assert!(p.validate_admissible(16, 1).all_passed());
        let (f0, x0) = cfg.initial_state(p.basis()).unwrap();
        assert_eq!(f0.as_slice(), &[1.0, 0.2, 0.0, 0.0]);
        assert_eq!(x0.get(1, 1), 0.1);
    }

    #[test]
    fn rejects_ambiguous_and_unknown_entries() {
        let two = BNS.replace("diag = [0.3, 0.2, 0.1, 0.1]", "diag = [0.3]\nouter = [1.0]");
        assert!(ModelConfig::parse(&two).unwrap().params().is_err());
        assert!(matches!(ModelConfig::parse("[space]\ntheta = 1"), Err(Error::Parse(_))));
        let bad_shape = BNS.replace("diag = [0.3, 0.2, 0.1, 0.1]", "rows = [[1.0]]");
        assert!(matches!(ModelConfig::parse(&bad_shape).unwrap().params(), Err(Error::Shape(_))));
    }

    #[test]
    fn hump_curve_is_projected() {
        let text = BNS.replace("f0 = { coeffs = [1.0, 0.2] }", "f0 = { hump = { amplitude = 1.0, center = 1.0, width = 0.3 } }");
        let cfg = ModelConfig::parse(&text).unwrap();
        let b = cfg.basis().unwrap();
        let (f0, _) = cfg.initial_state(&b).unwrap();
        // symmetric hump: even modes vanish
        assert!(f0.as_slice()[1].abs() < 1e-12 && f0.as_slice()[0] > 0.1);
    }

    #[test]
    fn error_codes() {
        assert_eq!(CliError::from(Error::Parse("x".into())).code, EXIT_USAGE);
        assert_eq!(CliError::from(Error::Quadrature("x".into())).code, EXIT_MODEL);
        assert_eq!(run(["heatvol", "frobnicate"]), EXIT_USAGE);
        assert_eq!(run(["heatvol", "--help"]), EXIT_OK);
    }

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(manifest_path(Path::new("out/p.csv")), PathBuf::from("out/p.csv.manifest.json"));
    }
}
