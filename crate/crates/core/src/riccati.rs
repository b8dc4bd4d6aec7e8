//! Spectral Galerkin solution of the generalized mild Riccati equations.
//!
//! At rank `d` the covariance system reads
//! `psi' = L(psi) + R_hat_d(psi)`, `Phi' = F_d(psi)` with `psi(0) = P_d u2`,
//! and the joint system replaces `R_hat_d` by `R_hat_d(psi2) - 1/2 (P_d psi1)^2`
//! with the transport `psi1(t) = S(t)^* u1`. The Lyapunov part is diagonal in
//! `e_i (x) e_j`, so it is integrated exactly by an exponential midpoint rule.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::affine_params::AffineParams;
use crate::error::{Error, Result};
use crate::operator_space::{RealOp, SymOp};
use crate::quadrature::GaussLegendre;
use crate::spectral_basis::{CurveCoeffs, EigenBasis};
use crate::{Scalar, C64};

/// `(Phi, psi1, psi2)` on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiTrajectory<T: Scalar = C64> {
    pub times: Vec<f64>,
    pub phi: Vec<T>,
    /// Full basis rank.
    pub psi1: Vec<CurveCoeffs<T>>,
    /// Galerkin rank `d`.
    pub psi2: Vec<SymOp<T>>,
    pub rank_d: usize,
}

impl<T: Scalar> RiccatiTrajectory<T> {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Index of `t` on the grid, or an off-grid error.
    pub fn node(&self, t: f64) -> Result<usize> {
        let scale = 1e-10 * self.final_time().abs().max(1.0);
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= scale)
            .ok_or(Error::OffGrid(t))
    }

    pub fn to_complex(&self) -> RiccatiTrajectory<C64> {
        let c = |x: T| C64::new(x.real(), x.imaginary());
        RiccatiTrajectory {
            times: self.times.clone(),
            phi: self.phi.iter().map(|&p| c(p)).collect(),
            psi1: self.psi1.iter().map(|v| CurveCoeffs(v.0.map(c))).collect(),
            psi2: self.psi2.iter().map(|a| SymOp::from_matrix_unchecked(a.matrix().map(c))).collect(),
            rank_d: self.rank_d,
        }
    }

    /// CSV with `t, re_phi, im_phi` and the upper triangle of `psi2`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.rank_d;
        let mut header = vec!["t".to_string(), "re_phi".into(), "im_phi".into()];
        for i in 0..d {
            for j in i..d {
                header.push(format!("re_psi2_{i}_{j}"));
                header.push(format!("im_psi2_{i}_{j}"));
            }
        }
        w.write_record(&header)?;
        for (k, &t) in self.times.iter().enumerate() {
            let mut row = vec![fmt(t), fmt(self.phi[k].real()), fmt(self.phi[k].imaginary())];
            let m = self.psi2[k].matrix();
            for i in 0..d {
                for j in i..d {
                    row.push(fmt(m[(i, j)].real()));
                    row.push(fmt(m[(i, j)].imaginary()));
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_record(&self) -> TrajectoryRecord {
        let pair = |x: &T| [x.real(), x.imaginary()];
        TrajectoryRecord {
            rank_d: self.rank_d,
            times: self.times.clone(),
            phi: self.phi.iter().map(pair).collect(),
            psi1: self.psi1.iter().map(|v| v.0.iter().map(pair).collect()).collect(),
            psi2: self
                .psi2
                .iter()
                .map(|a| {
                    let m = a.matrix();
                    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| pair(&m[(i, j)])).collect()).collect()
                })
                .collect(),
        }
    }
}

impl RiccatiTrajectory<C64> {
    pub fn from_record(r: &TrajectoryRecord) -> Result<Self> {
        let c = |p: &[f64; 2]| C64::new(p[0], p[1]);
        let n = r.times.len();
        if r.phi.len() != n || r.psi1.len() != n || r.psi2.len() != n {
            return Err(Error::Input("trajectory record has ragged arrays".into()));
        }
        let psi2 = r
            .psi2
            .iter()
            .map(|rows| {
                let d = rows.len();
                if rows.iter().any(|row| row.len() != d) {
                    return Err(Error::Input("psi2 entry is not square".into()));
                }
                SymOp::new(DMatrix::from_fn(d, d, |i, j| c(&rows[i][j])))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            times: r.times.clone(),
            phi: r.phi.iter().map(c).collect(),
            psi1: r.psi1.iter().map(|v| CurveCoeffs::from_vec(v.iter().map(c).collect())).collect(),
            psi2,
            rank_d: r.rank_d,
        })
    }
}

/// Full-precision serializable form of a trajectory (complex entries as `[re, im]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub rank_d: usize,
    pub times: Vec<f64>,
    pub phi: Vec<[f64; 2]>,
    pub psi1: Vec<Vec<[f64; 2]>>,
    pub psi2: Vec<Vec<Vec<[f64; 2]>>>,
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

/// `N = max(200, 20 ceil(T lambda_max / 10))` with `lambda_max = 2 lambda_d`.
pub fn default_steps(basis: &EigenBasis, d: usize, t_end: f64) -> usize {
    let d = d.clamp(1, basis.rank());
    let lam_max = 2.0 * basis.eigenvalues()[d - 1];
    let blocks = (t_end.abs() * lam_max / 10.0).ceil() as usize;
    200.max(20 * blocks)
}

/// `phi_k(z) = sum_j z^j / (j + k)!` for `k = 1, 2, 3`.
fn phi_funcs(z: f64) -> [f64; 3] {
    if z.abs() < 0.5 {
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            let mut term = 1.0 / (1..=k + 1).product::<usize>() as f64;
            for j in 1..=24 {
                *o += term;
                term *= z / (j + k + 1) as f64;
            }
        }
        out
    } else {
        let p1 = z.exp_m1() / z;
        let p2 = (p1 - 1.0) / z;
        let p3 = (p2 - 0.5) / z;
        [p1, p2, p3]
    }
}

fn hadamard<T: Scalar>(w: &DMatrix<f64>, a: &SymOp<T>) -> SymOp<T> {
    SymOp::from_matrix_unchecked(a.matrix().zip_map(w, |x, f| x * T::from_real(f)))
}

/// Entrywise factors `e^{-Lambda s}` and `s^k phi_k(-Lambda s)` for `s = h/2, h`.
struct StepFactors {
    decay: DMatrix<f64>,
    phi: [DMatrix<f64>; 3],
}

impl StepFactors {
    fn new(lam: &[f64], s: f64) -> Self {
        let d = lam.len();
        let table: Vec<[f64; 3]> = (0..d * d).map(|k| phi_funcs(-(lam[k % d] + lam[k / d]) * s)).collect();
        let at = |p: usize| DMatrix::from_fn(d, d, |i, j| table[i + d * j][p] * s.powi(p as i32 + 1));
        Self {
            decay: DMatrix::from_fn(d, d, |i, j| (-(lam[i] + lam[j]) * s).exp()),
            phi: [at(0), at(1), at(2)],
        }
    }

    /// `int_0^s e^{-Lambda (s - r)} p(r) dr` for `p(r) = g0 + r g1 + r^2/2 g2`.
    fn forcing<T: Scalar>(&self, g: &[SymOp<T>; 3]) -> SymOp<T> {
        let mut out = hadamard(&self.phi[0], &g[0]);
        out.axpy_mut(T::one(), &hadamard(&self.phi[1], &g[1]));
        out.axpy_mut(T::one(), &hadamard(&self.phi[2], &g[2]));
        out
    }
}

struct Propagator {
    h: f64,
    half: StepFactors,
    full: StepFactors,
}

impl Propagator {
    fn new(lam: &[f64], h: f64) -> Self {
        Self { h, half: StepFactors::new(lam, 0.5 * h), full: StepFactors::new(lam, h) }
    }

    /// One exponential step of `x' = -Lambda x + N(x) + G(t)`: midpoint for the
    /// state-dependent part `N`, quadratic interpolation of `G` through
    /// `g0, g_half, g1`. Returns `(mid, next)`.
    fn step<T: Scalar, N>(&self, x: &SymOp<T>, forcing: Option<[&SymOp<T>; 3]>, nonlin: N) -> (SymOp<T>, SymOp<T>)
    where
        N: Fn(&SymOp<T>) -> SymOp<T>,
    {
        let h = self.h;
        let poly = forcing.map(|[g0, gm, g1]| {
            let mut d1 = g0.scale(T::from_real(-3.0 / h));
            d1.axpy_mut(T::from_real(4.0 / h), gm);
            d1.axpy_mut(T::from_real(-1.0 / h), g1);
            let mut d2 = g0.scale(T::from_real(4.0 / (h * h)));
            d2.axpy_mut(T::from_real(-8.0 / (h * h)), gm);
            d2.axpy_mut(T::from_real(4.0 / (h * h)), g1);
            [g0.clone(), d1, d2]
        });
        let mut mid = hadamard(&self.half.decay, x);
        let n0 = nonlin(x);
        mid.axpy_mut(T::one(), &hadamard(&self.half.phi[0], &n0));
        if let Some(p) = &poly {
            mid.axpy_mut(T::one(), &self.half.forcing(p));
        }
        let mut next = hadamard(&self.full.decay, x);
        next.axpy_mut(T::one(), &hadamard(&self.full.phi[0], &nonlin(&mid)));
        if let Some(p) = &poly {
            next.axpy_mut(T::one(), &self.full.forcing(p));
        }
        (mid, next)
    }
}

/// Prepared rank-`d` solver: projected parameters plus the full basis for `psi1`.
#[derive(Debug, Clone)]
pub struct GalerkinSolver {
    full_basis: EigenBasis,
    reduced: AffineParams,
    d: usize,
}

impl GalerkinSolver {
    pub fn new(params: &AffineParams, d: usize) -> Result<Self> {
        if d == 0 || d > params.dim() {
            return Err(Error::Shape(format!("Galerkin rank {d} outside 1..={}", params.dim())));
        }
        Ok(Self { full_basis: params.basis().clone(), reduced: params.project(d)?, d })
    }

    pub fn rank(&self) -> usize {
        self.d
    }

    pub fn reduced_params(&self) -> &AffineParams {
        &self.reduced
    }

    fn initial<T: Scalar>(&self, u2: &SymOp<T>) -> Result<SymOp<T>> {
        if u2.dim() >= self.d {
            u2.leading_block(self.d)
        } else {
            u2.embed(self.d)
        }
    }

    /// Integrates the system on `[0, t_end]` with `steps` uniform steps.
    /// `forcing(k)` returns `psi1` at time `k h / 2` (full rank) for the joint system.
    /// With `record == false` only the first and last nodes are stored.
    pub(crate) fn integrate<T: Scalar, F>(
        &self,
        u2: &SymOp<T>,
        t_end: f64,
        steps: usize,
        forcing: Option<F>,
        record: bool,
    ) -> Result<RiccatiTrajectory<T>>
    where
        F: Fn(usize) -> Result<CurveCoeffs<T>>,
    {
        if steps == 0 {
            return Err(Error::Config("Riccati solver needs at least one step".into()));
        }
        if !(t_end.is_finite() && t_end >= 0.0) {
            return Err(Error::Domain(format!("horizon must be finite and nonnegative, got {t_end}")));
        }
        let d = self.d;
        let full = self.full_basis.rank();
        let h = t_end / steps as f64;
        let prop = Propagator::new(&self.full_basis.eigenvalues()[..d], h);
        let limit = 1e8 * (1.0 + u2.norm());

        let mut psi = self.initial(u2)?;
        let mut phi = T::zero();
        let psi1_at = |k: usize| -> Result<CurveCoeffs<T>> {
            match &forcing {
                Some(f) => f(k),
                None => Ok(CurveCoeffs::zeros(full)),
            }
        };
        // -1/2 (P_d psi1)^{(x)2}
        let quad_term = |w: &CurveCoeffs<T>| {
            let lead = CurveCoeffs(w.0.rows(0, d).into_owned());
            SymOp::outer(&lead).scale(T::from_real(-0.5))
        };
        let rhat = |a: &SymOp<T>| self.reduced.rhat_unchecked(a);

        let cap = if record { steps + 1 } else { 2 };
        let mut traj = RiccatiTrajectory {
            times: Vec::with_capacity(cap),
            phi: Vec::with_capacity(cap),
            psi1: Vec::with_capacity(cap),
            psi2: Vec::with_capacity(cap),
            rank_d: d,
        };
        let mut w0 = psi1_at(0)?;
        traj.times.push(0.0);
        traj.phi.push(phi);
        traj.psi1.push(w0.clone());
        traj.psi2.push(psi.clone());
        let mut f_prev = self.reduced.f_unchecked(&psi);

        for n in 0..steps {
            let (mid, next, w1) = if forcing.is_some() {
                let wm = psi1_at(2 * n + 1)?;
                let w1 = psi1_at(2 * n + 2)?;
                let g = [quad_term(&w0), quad_term(&wm), quad_term(&w1)];
                let (mid, next) = prop.step(&psi, Some([&g[0], &g[1], &g[2]]), rhat);
                (mid, next, w1)
            } else {
                let (mid, next) = prop.step(&psi, None, rhat);
                (mid, next, w0.clone())
            };
            let f_next = self.reduced.f_unchecked(&next);
            phi += T::from_real(h / 6.0) * (f_prev + T::from_real(4.0) * self.reduced.f_unchecked(&mid) + f_next);
            f_prev = f_next;
            psi = next;
            w0 = w1;

            let t = if n + 1 == steps { t_end } else { (n + 1) as f64 * h };
            let norm = psi.norm();
            if !(norm <= limit) || !phi.is_finite() {
                return Err(Error::Divergence { time: t, norm, limit });
            }
            if record || n + 1 == steps {
                traj.times.push(t);
                traj.phi.push(phi);
                traj.psi1.push(w0.clone());
                traj.psi2.push(psi.clone());
            }
        }
        Ok(traj)
    }
}

/// Covariance Riccati system at Galerkin rank `d`.
pub fn solve_covariance_riccati<T: Scalar>(
    params: &AffineParams,
    u2: &SymOp<T>,
    t_end: f64,
    steps: usize,
    d: usize,
) -> Result<RiccatiTrajectory<T>> {
    let solver = GalerkinSolver::new(params, d)?;
    solver.integrate::<T, fn(usize) -> Result<CurveCoeffs<T>>>(u2, t_end, steps, None, true)
}

/// Joint system with `psi1(t) = S(t)^* u1` and `u1` of full basis length.
pub fn solve_joint_riccati<T: Scalar>(
    params: &AffineParams,
    u1: &CurveCoeffs<T>,
    u2: &SymOp<T>,
    t_end: f64,
    steps: usize,
    d: usize,
) -> Result<RiccatiTrajectory<T>> {
    let solver = GalerkinSolver::new(params, d)?;
    if u1.len() != params.dim() {
        return Err(Error::Shape(format!("u1 has length {}, basis rank is {}", u1.len(), params.dim())));
    }
    let basis = params.basis();
    let h = t_end / steps.max(1) as f64;
    let forcing = |k: usize| basis.shift_adjoint_apply(0.5 * h * k as f64, u1);
    solver.integrate(u2, t_end, steps, Some(forcing), true)
}

/// `||psi(T; h) - psi(T; h/2)||` for the covariance system.
pub fn step_halving_error<T: Scalar>(
    params: &AffineParams,
    u2: &SymOp<T>,
    t_end: f64,
    steps: usize,
    d: usize,
) -> Result<f64> {
    let solver = GalerkinSolver::new(params, d)?;
    let run = |n: usize| {
        solver.integrate::<T, fn(usize) -> Result<CurveCoeffs<T>>>(u2, t_end, n, None, false)
    };
    let a = run(steps)?;
    let b = run(2 * steps)?;
    let da = a.psi2.last().unwrap();
    let db = b.psi2.last().unwrap();
    Ok(da.sub(db)?.norm())
}

/// `exp(-Phi(t) + <f0, psi1(t)> - <x0, psi2(t)>)` with bilinear pairings.
pub fn cf_joint(
    _params: &AffineParams,
    f0: &CurveCoeffs,
    x0: &RealOp,
    traj: &RiccatiTrajectory<C64>,
    t: f64,
) -> Result<C64> {
    let k = traj.node(t)?;
    let psi1 = &traj.psi1[k];
    let psi2 = &traj.psi2[k];
    if f0.len() != psi1.len() {
        return Err(Error::Shape(format!("f0 has length {}, psi1 has length {}", f0.len(), psi1.len())));
    }
    let x = if x0.dim() >= psi2.dim() { x0.leading_block(psi2.dim())? } else { x0.embed(psi2.dim())? };
    let lin: C64 = f0.0.iter().zip(psi1.0.iter()).map(|(&a, &b)| b * a).sum();
    let quad = crate::affine_params::pair_real(&x, psi2);
    Ok((-traj.phi[k] + lin - quad).exp())
}

/// Composite Gauss-Legendre rule on `[a, b]` with panels refined geometrically
/// toward `b` (or `a`), resolving boundary layers of width down to `(b-a) 2^-levels`.
fn graded_rule(rule: &GaussLegendre, a: f64, b: f64, toward_b: bool, levels: usize) -> Vec<(f64, f64)> {
    let len = b - a;
    let mut out = Vec::with_capacity((levels + 1) * rule.nodes.len());
    if len <= 0.0 {
        return out;
    }
    let mut cuts: Vec<f64> = (0..=levels).map(|j| 1.0 - 0.5f64.powi(j as i32)).collect();
    cuts.push(1.0);
    for w in cuts.windows(2) {
        let (lo, hi) = if toward_b { (w[0], w[1]) } else { (1.0 - w[1], 1.0 - w[0]) };
        out.extend(rule.mapped(a + lo * len, a + hi * len));
    }
    out
}


/// Closed-form characteristic function of the BNS subclass,
/// `E exp(i <f_t, v> )` for real `v`, by nested Gauss-Legendre quadrature.
pub fn cf_bns_closed_form(
    params: &AffineParams,
    f0: &CurveCoeffs,
    x0: &RealOp,
    v: &CurveCoeffs,
    t: f64,
    quad_steps: usize,
) -> Result<C64> {
    if !params.is_bns() {
        return Err(Error::ModelClass("closed form needs Gamma = 0 and mu = 0".into()));
    }
    let basis = params.basis();
    let dim = params.dim();
    if f0.len() != dim || v.len() != dim {
        return Err(Error::Shape("f0 and v must have full basis length".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::Domain(format!("time must be nonnegative, got {t}")));
    }
    let rule = GaussLegendre::new(quad_steps.max(2));
    let x = if x0.dim() >= dim { x0.leading_block(dim)? } else { x0.embed(dim)? };
    let lam_max = 2.0 * basis.eigenvalues()[dim - 1];
    let levels = (lam_max * t).max(1.0).log2().ceil() as usize + 4;

    // psi2(s) = 1/2 int_0^s T(s - tau) (S(tau)^* v)^{(x)2} dtau
    let psi2_at = |s: f64| -> Result<RealOp> {
        let mut acc = RealOp::zeros(dim);
        for (tau, w) in graded_rule(&rule, 0.0, s, true, levels) {
            let wv = basis.shift_adjoint_apply(tau, v)?;
            let term = RealOp::outer(&wv).semigroup_apply(basis, s - tau)?;
            acc.axpy_mut(0.5 * w, &term);
        }
        Ok(acc)
    };
    let mut phi = 0.0;
    for (s, w) in graded_rule(&rule, 0.0, t, false, levels) {
        phi += w * params.levy_laplace_exponent(&psi2_at(s)?)?;
    }
    let psi2 = psi2_at(t)?;
    let transport = f0.pair(&basis.shift_adjoint_apply(t, v)?);
    let exponent = C64::new(-phi - x.hs_inner(&psi2)?, transport);
    Ok(exponent.exp())
}

/// `C_{T,d} = ||P_d^perp u|| + ||P_d^perp (sum_k mu_k)||`.
pub fn galerkin_error_quantity(params: &AffineParams, u: &RealOp, d: usize) -> Result<f64> {
    if d == 0 || d > params.dim() || u.dim() != params.dim() {
        return Err(Error::Shape(format!(
            "rank {d} and operator dimension {} must fit basis rank {}",
            u.dim(),
            params.dim()
        )));
    }
    let mu = params.mu_total();
    Ok(u.project_rank_complement(d)?.norm() + mu.project_rank_complement(d)?.norm())
}

/// First moment `E X_t` on a uniform grid (Galerkin rank of `params`), solving
/// `x' = L(x) + Gamma(x) + sum_k (xi_k - chi(xi_k)) <x, mu_k>/|xi_k|^2 + b + sum_k c_k (xi_k - chi(xi_k))`.
pub fn mean_covariance(params: &AffineParams, x0: &RealOp, t_end: f64, steps: usize) -> Result<Vec<RealOp>> {
    if steps == 0 {
        return Err(Error::Config("first-moment solver needs at least one step".into()));
    }
    let d = params.dim();
    if x0.dim() != d {
        return Err(Error::Shape(format!("x0 has dimension {}, model has {d}", x0.dim())));
    }
    let h = t_end / steps as f64;
    let prop = Propagator::new(params.basis().eigenvalues(), h);
    let c = params.mean_drift();
    let lin = |x: &RealOp| params.mean_linear_drift(x);
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.clone());
    for _ in 0..steps {
        let (_, next) = prop.step(&x, Some([&c, &c, &c]), lin);
        x = next;
        out.push(x.clone());
    }
    Ok(out)
}

/// One row of a Galerkin convergence table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub d: usize,
    /// `max_t (|Phi_d - Phi_ref| + ||psi_d - psi_ref||)` over the common grid.
    pub err: f64,
    pub c_td: f64,
    /// `err / c_td`, zero when both vanish.
    pub ratio: f64,
    pub runtime_ms: f64,
}

/// Covariance-system errors at each rank in `ranks` against the largest one,
/// all on the step grid of the largest rank. Returns the rows and the
/// smallest `K` with `err(d) <= K C_{T,d}` over the non-reference rows.
pub fn galerkin_convergence(
    params: &AffineParams,
    u2: &RealOp,
    t_end: f64,
    steps: Option<usize>,
    ranks: &[usize],
) -> Result<(Vec<ConvergenceRow>, f64)> {
    if ranks.is_empty() || ranks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("rank list must be nonempty and strictly increasing".into()));
    }
    let d_ref = *ranks.last().unwrap();
    if ranks[0] == 0 || d_ref > params.dim() {
        return Err(Error::Shape(format!("ranks must lie in 1..={}", params.dim())));
    }
    let steps = steps.unwrap_or_else(|| default_steps(params.basis(), d_ref, t_end));
    let solve = |d: usize| -> Result<(RiccatiTrajectory<f64>, f64)> {
        let start = std::time::Instant::now();
        let traj = solve_covariance_riccati(params, u2, t_end, steps, d)?;
        Ok((traj, start.elapsed().as_secs_f64() * 1e3))
    };
    let (reference, ref_ms) = solve(d_ref)?;
    let mut rows = Vec::with_capacity(ranks.len());
    for &d in ranks {
        let (traj, ms) = if d == d_ref { (reference.clone(), ref_ms) } else { solve(d)? };
        let mut err: f64 = 0.0;
        for k in 0..traj.len() {
            let lifted = traj.psi2[k].embed(d_ref)?;
            let e = (traj.phi[k] - reference.phi[k]).abs() + lifted.sub(&reference.psi2[k])?.norm();
            err = err.max(e);
        }
        let c_td = galerkin_error_quantity(params, u2, d)?;
        let ratio = if err == 0.0 { 0.0 } else { err / c_td };
        rows.push(ConvergenceRow { d, err, c_td, ratio, runtime_ms: ms });
    }
    let k_fit = rows
        .iter()
        .filter(|r| r.d != d_ref)
        .map(|r| r.ratio)
        .fold(0.0, f64::max);
    Ok((rows, k_fit))
}

/// CSV with columns `d, err, c_td, ratio, runtime_ms`.
pub fn write_convergence_csv<W: std::io::Write>(out: W, rows: &[ConvergenceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d", "err", "c_td", "ratio", "runtime_ms"])?;
    for r in rows {
        w.write_record([
            r.d.to_string(),
            fmt(r.err),
            fmt(r.c_td),
            fmt(r.ratio),
            format!("{:.3}", r.runtime_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
