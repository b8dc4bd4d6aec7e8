//! Monte Carlo paths of the rank-`d` covariance process and the modulated curve.
//!
//! Between jumps the covariance follows
//! `x' = L(x) + b - sum_k c_k chi(xi_k) + Gamma(x) - sum_k chi(xi_k) <x, mu_k>/|xi_k|^2`,
//! integrated by exponential Euler (exact when `Gamma = 0` and `mu = 0`).
//! State-independent jumps are compound Poisson; state-dependent jumps are
//! sampled by thinning against a local intensity bound.
//!
//! The curve uses the mild form `f_n = S(n dt) f0 + sum_k S((n - k - 1/2) dt) g_k`
//! with `g_k = sigma_k sqrt(dt) Z_k` and `sigma_k^2 = (X_k + X_{k+1}) / 2`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine_params::AffineParams;
use crate::error::{Error, Result};
use crate::operator_space::RealOp;
use crate::pricing::MarketSpec;
use crate::rng::{cell_rng, CHANNEL_MU_JUMPS, CHANNEL_M_JUMPS, CHANNEL_NOISE};
use crate::spectral_basis::{CurveCoeffs, EigenBasis};
use crate::C64;

/// Which nodes of a path are kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Record {
    #[default]
    Full,
    /// Initial and terminal node only.
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    pub rank: usize,
    #[serde(default = "default_true")]
    pub psd_repair: bool,
    #[serde(default)]
    pub record: Record,
}

fn default_true() -> bool {
    true
}

impl SimConfig {
    pub fn new(horizon: f64, dt: f64, n_paths: usize, seed: u64, rank: usize) -> Self {
        Self { horizon, dt, n_paths, seed, rank, psd_repair: true, record: Record::Full }
    }

    pub fn terminal(mut self) -> Self {
        self.record = Record::Terminal;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.dt > 0.0 && self.dt <= self.horizon) {
            return Err(Error::Config(format!("dt must lie in (0, horizon], got {}", self.dt)));
        }
        if self.n_paths == 0 {
            return Err(Error::Config("n_paths must be at least 1".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of steps; the effective step is `horizon / steps`.
    pub fn steps(&self) -> usize {
        let n = self.horizon / self.dt;
        // tolerate rounding in horizon / dt
        (n - 1e-9 * n.max(1.0)).ceil().max(1.0) as usize
    }
}

/// One simulated path.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPath {
    pub times: Vec<f64>,
    /// Empty for covariance-only runs.
    pub curve: Vec<CurveCoeffs>,
    pub cov: Vec<RealOp>,
    pub jump_times: Vec<f64>,
    pub m_jumps: usize,
    pub clipped_total: f64,
}

impl JointPath {
    pub fn terminal_cov(&self) -> &RealOp {
        self.cov.last().expect("paths have at least one node")
    }

    pub fn terminal_curve(&self) -> Option<&CurveCoeffs> {
        self.curve.last()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

const MAX_HALVINGS: usize = 12;

struct ThinningViolation;

/// Per-run constants shared by all paths.
struct Engine {
    params: AffineParams,
    drift: RealOp,
    m_rate: f64,
    m_weights: Vec<f64>,
    has_mu: bool,
    dt: f64,
    step_decay: DMatrix<f64>,
    step_phi: DMatrix<f64>,
}

fn entrywise(lam: &[f64], delta: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = lam.len();
    let decay = DMatrix::from_fn(d, d, |i, j| (-(lam[i] + lam[j]) * delta).exp());
    let phi = DMatrix::from_fn(d, d, |i, j| {
        let z = -(lam[i] + lam[j]) * delta;
        if z == 0.0 {
            delta
        } else {
            delta * z.exp_m1() / z
        }
    });
    (decay, phi)
}

fn sample_index<R: Rng>(rng: &mut R, weights: &[f64], total: f64) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return k;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

struct StepRngs {
    m: ChaCha8Rng,
    mu: ChaCha8Rng,
}

struct Events<'a> {
    times: &'a mut Vec<f64>,
    m_jumps: &'a mut usize,
}

impl Engine {
    fn new(params: &AffineParams, d: usize, dt: f64) -> Result<Self> {
        let params = params.project(d)?;
        let (step_decay, step_phi) = entrywise(params.basis().eigenvalues(), dt);
        let m_weights: Vec<f64> = params.m_atoms().iter().map(|a| a.weight).collect();
        Ok(Self {
            drift: params.pathwise_drift(),
            m_rate: m_weights.iter().sum(),
            m_weights,
            has_mu: !params.mu_atoms().is_empty(),
            params,
            dt,
            step_decay,
            step_phi,
        })
    }

    /// Deterministic flow over `delta` without jumps.
    fn flow(&self, x: &RealOp, delta: f64) -> RealOp {
        if delta <= 0.0 {
            return x.clone();
        }
        let owned;
        let (decay, phi) = if (delta - self.dt).abs() <= 1e-15 * self.dt {
            (&self.step_decay, &self.step_phi)
        } else {
            owned = entrywise(self.params.basis().eigenvalues(), delta);
            (&owned.0, &owned.1)
        };
        let mut forcing = self.drift.clone();
        if !self.params.gamma().is_zero() || self.has_mu {
            forcing.axpy_mut(1.0, &self.params.pathwise_linear_drift(x));
        }
        let m = x.matrix().component_mul(decay) + forcing.matrix().component_mul(phi);
        RealOp::symmetrize(m)
    }

    fn mu_bound(&self, x: &RealOp, remaining: f64) -> f64 {
        if !self.has_mu {
            return 0.0;
        }
        let now: f64 = self.params.mu_intensities(x).iter().sum();
        let end: f64 = self.params.mu_intensities(&self.flow(x, remaining)).iter().sum();
        2.0 * (now + end)
    }

    /// Advances over `[t0, t0 + len]` processing jumps in time order.
    fn advance(
        &self,
        x0: &RealOp,
        t0: f64,
        len: f64,
        rngs: &mut StepRngs,
        ev: &mut Events<'_>,
    ) -> std::result::Result<RealOp, ThinningViolation> {
        let mut x = x0.clone();
        let mut s = 0.0;
        let mut bound = self.mu_bound(&x, len);
        loop {
            let rem = len - s;
            let tm = if self.m_rate > 0.0 {
                rngs.m.sample::<f64, _>(Exp1) / self.m_rate
            } else {
                f64::INFINITY
            };
            let tc = if bound > 0.0 {
                rngs.mu.sample::<f64, _>(Exp1) / bound
            } else {
                f64::INFINITY
            };
            let tau = tm.min(tc);
            if tau >= rem {
                return Ok(self.flow(&x, rem));
            }
            x = self.flow(&x, tau);
            s += tau;
            if tm <= tc {
                let k = sample_index(&mut rngs.m, &self.m_weights, self.m_rate);
                x.axpy_mut(1.0, &self.params.m_atoms()[k].jump);
                ev.times.push(t0 + s);
                *ev.m_jumps += 1;
            } else {
                let lam = self.params.mu_intensities(&x);
                let total: f64 = lam.iter().sum();
                if total > bound * (1.0 + 1e-12) {
                    return Err(ThinningViolation);
                }
                if rngs.mu.random::<f64>() * bound < total {
                    let k = sample_index(&mut rngs.mu, &lam, total);
                    x.axpy_mut(1.0, &self.params.mu_atoms()[k].jump);
                    ev.times.push(t0 + s);
                }
            }
            bound = self.mu_bound(&x, len - s);
        }
    }

    /// `advance` with step halving on thinning-bound violations.
    fn advance_robust(
        &self,
        x0: &RealOp,
        t0: f64,
        len: f64,
        rngs: &mut StepRngs,
        ev: &mut Events<'_>,
        depth: usize,
    ) -> Result<RealOp> {
        let (n_times, n_m) = (ev.times.len(), *ev.m_jumps);
        match self.advance(x0, t0, len, rngs, ev) {
            Ok(x) => Ok(x),
            Err(ThinningViolation) => {
                ev.times.truncate(n_times);
                *ev.m_jumps = n_m;
                if depth >= MAX_HALVINGS {
                    return Err(Error::Simulation(format!(
                        "thinning bound violated after {MAX_HALVINGS} step halvings at t = {t0}"
                    )));
                }
                let half = 0.5 * len;
                let mid = self.advance_robust(x0, t0, half, rngs, ev, depth + 1)?;
                self.advance_robust(&mid, t0 + half, half, rngs, ev, depth + 1)
            }
        }
    }
}

/// Shift matrices `S(j dt)` and `S((j + 1/2) dt)` restricted to the noise columns.
struct CurveKernel {
    basis: EigenBasis,
    whole: Vec<DMatrix<f64>>,
    half: Vec<DMatrix<f64>>,
}

impl CurveKernel {
    fn new(basis: &EigenBasis, steps: usize, dt: f64, d: usize) -> Result<Self> {
        let mut whole = Vec::with_capacity(steps + 1);
        let mut half = Vec::with_capacity(steps);
        for j in 0..=steps {
            whole.push(basis.shift_matrix(j as f64 * dt)?);
            if j < steps {
                half.push(basis.shift_matrix((j as f64 + 0.5) * dt)?.columns(0, d).into_owned());
            }
        }
        Ok(Self { basis: basis.clone(), whole, half })
    }
}

struct Plan<'a> {
    engine: Engine,
    cfg: &'a SimConfig,
    steps: usize,
    dt: f64,
    x0: RealOp,
}

impl<'a> Plan<'a> {
    fn new(params: &AffineParams, x0: &RealOp, cfg: &'a SimConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.rank > params.dim() {
            return Err(Error::Shape(format!("simulation rank {} exceeds basis rank {}", cfg.rank, params.dim())));
        }
        if !x0.is_psd() {
            return Err(Error::NotPsd { min_eig: x0.min_eigenvalue(), tol: 1e-10 });
        }
        let d = cfg.rank;
        let x0 = if x0.dim() >= d { x0.leading_block(d)? } else { x0.embed(d)? };
        let steps = cfg.steps();
        let dt = cfg.horizon / steps as f64;
        Ok(Self { engine: Engine::new(params, d, dt)?, cfg, steps, dt, x0 })
    }

    fn path(&self, index: usize, curve: Option<(&CurveKernel, &CurveCoeffs)>) -> Result<JointPath> {
        let d = self.cfg.rank;
        let keep_all = self.cfg.record == Record::Full;
        let cap = if keep_all { self.steps + 1 } else { 2 };
        let mut times = Vec::with_capacity(cap);
        let mut covs = Vec::with_capacity(cap);
        let mut curves = Vec::with_capacity(if curve.is_some() { cap } else { 0 });
        let mut jump_times = Vec::new();
        let mut m_jumps = 0;
        let mut clipped_total = 0.0;
        let mut noises: Vec<DVector<f64>> = Vec::new();

        let mut x = self.x0.clone();
        times.push(0.0);
        covs.push(x.clone());
        if let Some((_, f0)) = curve {
            curves.push(f0.clone());
        }
        for n in 0..self.steps {
            let t0 = n as f64 * self.dt;
            let mut rngs = StepRngs {
                m: cell_rng(self.cfg.seed, index as u64, n as u64, CHANNEL_M_JUMPS),
                mu: cell_rng(self.cfg.seed, index as u64, n as u64, CHANNEL_MU_JUMPS),
            };
            let mut ev = Events { times: &mut jump_times, m_jumps: &mut m_jumps };
            let mut next = self.engine.advance_robust(&x, t0, self.dt, &mut rngs, &mut ev, 0)?;
            if self.cfg.psd_repair {
                let (fixed, clipped) = next.psd_floor()?;
                next = fixed;
                clipped_total += clipped;
            }
            if !next.is_finite() {
                return Err(Error::Simulation(format!("non-finite covariance on path {index} at t = {}", t0 + self.dt)));
            }
            if let Some((kernel, f0)) = curve {
                let avg = x.add(&next)?.scale(0.5);
                let sigma = avg.sqrt_psd()?;
                let mut rng = cell_rng(self.cfg.seed, index as u64, n as u64, CHANNEL_NOISE);
                let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                noises.push(sigma.matrix() * z * self.dt.sqrt());
                if keep_all || n + 1 == self.steps {
                    curves.push(mild_curve(kernel, f0, &noises));
                }
            }
            x = next;
            if keep_all || n + 1 == self.steps {
                times.push(if n + 1 == self.steps { self.cfg.horizon } else { (n + 1) as f64 * self.dt });
                covs.push(x.clone());
            }
        }
        Ok(JointPath { times, curve: curves, cov: covs, jump_times, m_jumps, clipped_total })
    }
}

/// `S(n dt) f0 + sum_k S((n - k - 1/2) dt) g_k` with `n = noises.len()`.
fn mild_curve(kernel: &CurveKernel, f0: &CurveCoeffs, noises: &[DVector<f64>]) -> CurveCoeffs {
    let n = noises.len();
    let mut f = &kernel.whole[n] * &f0.0;
    for (k, g) in noises.iter().enumerate() {
        f += &kernel.half[n - k - 1] * g;
    }
    debug_assert_eq!(f.len(), kernel.basis.rank());
    CurveCoeffs(f)
}

fn run_paths<F>(n: usize, f: F) -> Result<Vec<JointPath>>
where
    F: Fn(usize) -> Result<JointPath> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Covariance paths only (`curve` left empty).
pub fn simulate_covariance(params: &AffineParams, x0: &RealOp, cfg: &SimConfig) -> Result<Vec<JointPath>> {
    let plan = Plan::new(params, x0, cfg)?;
    run_paths(cfg.n_paths, |i| plan.path(i, None))
}

/// Joint covariance and curve paths; the curve has the full basis rank.
pub fn simulate_joint(params: &AffineParams, f0: &CurveCoeffs, x0: &RealOp, cfg: &SimConfig) -> Result<Vec<JointPath>> {
    if f0.len() != params.dim() {
        return Err(Error::Shape(format!("f0 has length {}, basis rank is {}", f0.len(), params.dim())));
    }
    let plan = Plan::new(params, x0, cfg)?;
    let kernel = CurveKernel::new(params.basis(), plan.steps, plan.dt, cfg.rank)?;
    run_paths(cfg.n_paths, |i| plan.path(i, Some((&kernel, f0))))
}

/// Sample mean and standard error of a real statistic, summed in path order.
fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Monte Carlo estimate of `E exp(<f_T, u1> - <X_T, u2>)` with the standard
/// errors of its real and imaginary parts.
pub fn mc_char_function(paths: &[JointPath], u1: &CurveCoeffs<C64>, u2: &RealOp) -> Result<(C64, [f64; 2])> {
    if paths.is_empty() {
        return Err(Error::Input("empty path set".into()));
    }
    let mut re = Vec::with_capacity(paths.len());
    let mut im = Vec::with_capacity(paths.len());
    for p in paths {
        let x = p.terminal_cov();
        let u = if u2.dim() >= x.dim() { u2.leading_block(x.dim())? } else { u2.embed(x.dim())? };
        let lin = match p.terminal_curve() {
            Some(f) => {
                if f.len() != u1.len() {
                    return Err(Error::Shape(format!("u1 has length {}, curve has {}", u1.len(), f.len())));
                }
                f.0.iter().zip(u1.0.iter()).map(|(&a, &b)| b * a).sum::<C64>()
            }
            None => C64::new(0.0, 0.0),
        };
        let v = (lin - C64::new(x.hs_inner(&u)?, 0.0)).exp();
        re.push(v.re);
        im.push(v.im);
    }
    let (mr, sr) = mean_se(&re);
    let (mi, si) = mean_se(&im);
    Ok((C64::new(mr, mi), [sr, si]))
}

/// Monte Carlo price of the flow-forward call `(l(f_t) - K)^+` at `t = horizon`.
pub fn mc_price_flow_call(paths: &[JointPath], market: &MarketSpec, basis: &EigenBasis) -> Result<(f64, f64)> {
    if paths.is_empty() {
        return Err(Error::Input("empty path set".into()));
    }
    let (a, b) = market.window();
    if !(a >= 0.0 && a < b && b <= basis.theta_max() * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("delivery window [{a}, {b}] outside [0, {}]", basis.theta_max())));
    }
    let ell = basis.averaging_functional(a, b.min(basis.theta_max()))?;
    let mut pay = Vec::with_capacity(paths.len());
    for p in paths {
        if (p.horizon() - market.exercise_t).abs() > 1e-9 * market.exercise_t.max(1.0) {
            return Err(Error::Input(format!(
                "paths end at {} but the option is exercised at {}",
                p.horizon(),
                market.exercise_t
            )));
        }
        let f = p.terminal_curve().ok_or_else(|| Error::Input("paths carry no curve".into()))?;
        pay.push((ell.pair(f) - market.strike).max(0.0));
    }
    Ok(mean_se(&pay))
}

/// Writes one CSV row per stored node: path, step index, time, curve
/// coefficients and the upper triangle of the covariance.
pub fn write_paths_csv<W: Write>(out: W, paths: &[JointPath]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = paths.first() else {
        w.flush()?;
        return Ok(());
    };
    let dc = first.curve.first().map_or(0, |c| c.len());
    let dx = first.cov[0].dim();
    let mut header = vec!["path".to_string(), "node".into(), "t".into()];
    header.extend((0..dc).map(|i| format!("f_{i}")));
    for i in 0..dx {
        for j in i..dx {
            header.push(format!("x_{i}_{j}"));
        }
    }
    header.push("jumps".into());
    header.push("clipped".into());
    w.write_record(&header)?;
    for (p, path) in paths.iter().enumerate() {
        for (k, &t) in path.times.iter().enumerate() {
            let mut row = vec![p.to_string(), k.to_string(), format!("{t:.17e}")];
            if let Some(c) = path.curve.get(k) {
                row.extend(c.0.iter().map(|v| format!("{v:.17e}")));
            }
            let m = path.cov[k].matrix();
            for i in 0..dx {
                for j in i..dx {
                    row.push(format!("{:.17e}", m[(i, j)]));
                }
            }
            let jumps = path.jump_times.iter().filter(|&&s| s <= t).count();
            row.push(jumps.to_string());
            row.push(format!("{:.17e}", path.clipped_total));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PathLine<'a> {
    path: usize,
    times: &'a [f64],
    curve: Vec<&'a [f64]>,
    cov: Vec<Vec<f64>>,
    jump_times: &'a [f64],
    m_jumps: usize,
    clipped_total: f64,
}

/// Writes one JSON object per path and line. Covariances are stored as
/// row-major full matrices.
pub fn write_paths_jsonl<W: Write>(mut out: W, paths: &[JointPath]) -> Result<()> {
    for (p, path) in paths.iter().enumerate() {
        let line = PathLine {
            path: p,
            times: &path.times,
            curve: path.curve.iter().map(|c| c.as_slice()).collect(),
            cov: path.cov.iter().map(|x| x.matrix().transpose().as_slice().to_vec()).collect(),
            jump_times: &path.jump_times,
            m_jumps: path.m_jumps,
            clipped_total: path.clipped_total,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
