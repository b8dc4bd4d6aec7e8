//! Admissible parameter sets `(b, B, m, mu)` with finite atomic jump measures.
//!
//! The jump measures are finite sums of point masses on PSD operators:
//! `m = sum_k c_k delta_{xi_k}` and `mu = sum_k mu_k delta_{xi_k}`. The linear
//! part is `B(x) = Bx + xB^* + Gamma(x)` with `B` the (negative) Dirichlet
//! Laplacian and `Gamma(x) = gamma x + G x G^T + sum_j <nu_j, x> zeta_j`. The
//! last sum only appears after a finite-rank projection and carries the
//! compensator of state-dependent jumps that moved inside the unit ball.
//!
//! Truncation is `chi(xi) = xi 1_{|xi| <= 1}`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::operator_space::{ComplexOp, RealOp, SymOp};
use crate::spectral_basis::{CurveCoeffs, EigenBasis};
use crate::Scalar;

/// Radius of the truncation ball used by `chi`.
pub const TRUNCATION_RADIUS: f64 = 1.0;

/// One point mass of a jump measure.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpAtom {
    pub weight: f64,
    pub jump: RealOp,
    /// Present for atoms of the state-dependent measure `mu`.
    pub direction: Option<RealOp>,
}

impl JumpAtom {
    pub fn new(weight: f64, jump: RealOp) -> Self {
        Self { weight, jump, direction: None }
    }

    pub fn with_direction(weight: f64, jump: RealOp, direction: RealOp) -> Self {
        Self { weight, jump, direction: Some(direction) }
    }

    pub fn jump_norm(&self) -> f64 {
        self.jump.norm()
    }

    /// Whether `chi` keeps this jump (compensated atom).
    pub fn is_small(&self) -> bool {
        self.jump_norm() <= TRUNCATION_RADIUS
    }

    fn check(&self, dim: usize, need_direction: bool) -> Result<()> {
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::Config(format!("atom weight must be >= 0, got {}", self.weight)));
        }
        if self.jump.dim() != dim {
            return Err(Error::Shape(format!("atom of dimension {} in a {dim}-dimensional model", self.jump.dim())));
        }
        if !(self.jump.norm() > 0.0) || !self.jump.is_psd() {
            return Err(Error::Config("atom jumps must be nonzero and PSD".into()));
        }
        match (&self.direction, need_direction) {
            (Some(dir), true) => {
                if dir.dim() != dim || !dir.is_psd() {
                    return Err(Error::Config("mu-atom direction must be PSD with model dimension".into()));
                }
            }
            (None, true) => return Err(Error::Config("mu-atoms need a direction".into())),
            (Some(_), false) => return Err(Error::Config("m-atoms carry no direction".into())),
            (None, false) => {}
        }
        Ok(())
    }
}

/// Linear term `x -> <nu, x> zeta` of `Gamma` (adjoint `u -> <zeta, u> nu`).
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTerm {
    pub zeta: RealOp,
    pub nu: RealOp,
}

/// `Gamma(x) = gamma x + G x G^T + sum_j <nu_j, x> zeta_j`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GammaSpec {
    pub gamma_scalar: f64,
    pub gamma_factor: Option<DMatrix<f64>>,
    pub kernel_terms: Vec<KernelTerm>,
}

impl GammaSpec {
    pub fn scalar(gamma: f64) -> Self {
        Self { gamma_scalar: gamma, ..Self::default() }
    }

    pub fn is_zero(&self) -> bool {
        self.gamma_scalar == 0.0
            && self.gamma_factor.as_ref().is_none_or(|g| g.iter().all(|&v| v == 0.0))
            && self.kernel_terms.is_empty()
    }

    fn check(&self, dim: usize) -> Result<()> {
        if !(self.gamma_scalar.is_finite() && self.gamma_scalar >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma_scalar)));
        }
        if let Some(g) = &self.gamma_factor {
            if g.nrows() != dim || g.ncols() != dim {
                return Err(Error::Shape(format!("Gamma factor is {}x{}, expected {dim}x{dim}", g.nrows(), g.ncols())));
            }
        }
        for t in &self.kernel_terms {
            if t.zeta.dim() != dim || t.nu.dim() != dim || !t.zeta.is_psd() || !t.nu.is_psd() {
                return Err(Error::Config("Gamma kernel terms must be PSD with model dimension".into()));
            }
        }
        Ok(())
    }

    /// `Gamma(x)`.
    pub fn apply(&self, x: &RealOp) -> RealOp {
        let mut out = x.scale(self.gamma_scalar);
        if let Some(g) = &self.gamma_factor {
            let gx = SymOp::symmetrize(g * x.matrix() * g.transpose());
            out.axpy_mut(1.0, &gx);
        }
        for t in &self.kernel_terms {
            out.axpy_mut(t.nu.inner_unchecked(x), &t.zeta);
        }
        out
    }

    /// `Gamma^*(u)`, real or complex.
    pub fn adjoint<T: Scalar>(&self, u: &SymOp<T>) -> SymOp<T> {
        let mut out = u.scale(T::from_real(self.gamma_scalar));
        if let Some(g) = &self.gamma_factor {
            let gc = g.map(T::from_real);
            let m = gc.transpose() * u.matrix() * &gc;
            out.axpy_mut(T::one(), &SymOp::symmetrize(m));
        }
        for t in &self.kernel_terms {
            let c = pair_real(&t.zeta, u);
            out.axpy_mut(c, &lift(&t.nu));
        }
        out
    }

    fn project(&self, d: usize) -> Result<Self> {
        Ok(Self {
            gamma_scalar: self.gamma_scalar,
            gamma_factor: self.gamma_factor.as_ref().map(|g| g.view((0, 0), (d, d)).into_owned()),
            kernel_terms: self
                .kernel_terms
                .iter()
                .map(|t| {
                    Ok(KernelTerm {
                        zeta: t.zeta.leading_block(d)?,
                        nu: t.nu.leading_block(d)?,
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Bilinear pairing of a real operator with a real or complex one.
pub(crate) fn pair_real<T: Scalar>(x: &RealOp, u: &SymOp<T>) -> T {
    x.matrix()
        .iter()
        .zip(u.matrix().iter())
        .fold(T::zero(), |acc, (&a, &b)| acc + b * T::from_real(a))
}

pub(crate) fn lift<T: Scalar>(x: &RealOp) -> SymOp<T> {
    SymOp::from_matrix_unchecked(x.matrix().map(T::from_real))
}

#[derive(Debug, Clone, PartialEq)]
struct AtomCache {
    /// `chi(xi_k)` or `None` when the atom lies outside the unit ball.
    small: bool,
    /// `mu_k / |xi_k|^2` for mu-atoms.
    kernel: Option<RealOp>,
}

/// Validated container for `(b, B, m, mu)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    basis: EigenBasis,
    drift: RealOp,
    gamma: GammaSpec,
    m_atoms: Vec<JumpAtom>,
    mu_atoms: Vec<JumpAtom>,
    m_cache: Vec<AtomCache>,
    mu_cache: Vec<AtomCache>,
}

impl AffineParams {
    /// Checks shapes and atom invariants. Admissibility itself is reported by
    /// [`AffineParams::validate_admissible`].
    pub fn new(
        basis: EigenBasis,
        drift: RealOp,
        gamma: GammaSpec,
        m_atoms: Vec<JumpAtom>,
        mu_atoms: Vec<JumpAtom>,
    ) -> Result<Self> {
        if !drift.is_psd() {
            return Err(Error::Config("drift b must be PSD".into()));
        }
        Self::new_unchecked_drift(basis, drift, gamma, m_atoms, mu_atoms)
    }

    /// As [`AffineParams::new`] but accepts any symmetric drift, so that a
    /// violating set can still be passed to [`AffineParams::validate_admissible`].
    pub fn new_unchecked_drift(
        basis: EigenBasis,
        drift: RealOp,
        gamma: GammaSpec,
        m_atoms: Vec<JumpAtom>,
        mu_atoms: Vec<JumpAtom>,
    ) -> Result<Self> {
        let dim = basis.rank();
        if drift.dim() != dim {
            return Err(Error::Shape(format!("drift has dimension {}, basis rank is {dim}", drift.dim())));
        }
        gamma.check(dim)?;
        for a in &m_atoms {
            a.check(dim, false)?;
        }
        for a in &mu_atoms {
            a.check(dim, true)?;
        }
        let m_cache = m_atoms
            .iter()
            .map(|a| AtomCache { small: a.is_small(), kernel: None })
            .collect();
        let mu_cache = mu_atoms
            .iter()
            .map(|a| AtomCache {
                small: a.is_small(),
                kernel: a
                    .direction
                    .as_ref()
                    .map(|dir| dir.scale(a.weight / a.jump.norm().powi(2))),
            })
            .collect();
        Ok(Self { basis, drift, gamma, m_atoms, mu_atoms, m_cache, mu_cache })
    }

    /// Pure drift model: no jumps, no Gamma.
    pub fn drift_only(basis: EigenBasis, drift: RealOp) -> Result<Self> {
        Self::new(basis, drift, GammaSpec::default(), Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.basis.rank()
    }

    pub fn basis(&self) -> &EigenBasis {
        &self.basis
    }

    pub fn drift(&self) -> &RealOp {
        &self.drift
    }

    pub fn gamma(&self) -> &GammaSpec {
        &self.gamma
    }

    pub fn m_atoms(&self) -> &[JumpAtom] {
        &self.m_atoms
    }

    pub fn mu_atoms(&self) -> &[JumpAtom] {
        &self.mu_atoms
    }

    /// No Gamma and no state-dependent jumps.
    pub fn is_bns(&self) -> bool {
        self.gamma.is_zero() && self.mu_atoms.is_empty()
    }

    fn check_dim<T: Scalar>(&self, u: &SymOp<T>) -> Result<()> {
        if u.dim() != self.dim() {
            return Err(Error::Shape(format!("argument of dimension {} for a {}-dimensional model", u.dim(), self.dim())));
        }
        Ok(())
    }

    /// `e^{-<xi,u>} - 1 + <chi(xi), u>` for one atom.
    fn jump_integrand<T: Scalar>(atom: &JumpAtom, small: bool, u: &SymOp<T>) -> T {
        let p = pair_real(&atom.jump, u);
        let comp = if small { p } else { T::zero() };
        (-p).exp() - T::one() + comp
    }

    /// `F(u) = <b,u> - sum_k c_k (e^{-<xi_k,u>} - 1 + <chi(xi_k),u>)`.
    pub fn f_eval<T: Scalar>(&self, u: &SymOp<T>) -> Result<T> {
        self.check_dim(u)?;
        Ok(self.f_unchecked(u))
    }

    pub(crate) fn f_unchecked<T: Scalar>(&self, u: &SymOp<T>) -> T {
        let mut acc = pair_real(&self.drift, u);
        for (a, c) in self.m_atoms.iter().zip(&self.m_cache) {
            acc -= T::from_real(a.weight) * Self::jump_integrand(a, c.small, u);
        }
        acc
    }

    /// `R_hat(u) = Gamma^*(u) - sum_k (e^{-<xi_k,u>} - 1 + <chi(xi_k),u>) mu_k/|xi_k|^2`.
    pub fn rhat_eval<T: Scalar>(&self, u: &SymOp<T>) -> Result<SymOp<T>> {
        self.check_dim(u)?;
        Ok(self.rhat_unchecked(u))
    }

    pub(crate) fn rhat_unchecked<T: Scalar>(&self, u: &SymOp<T>) -> SymOp<T> {
        let mut out = self.gamma.adjoint(u);
        for (a, c) in self.mu_atoms.iter().zip(&self.mu_cache) {
            if let Some(k) = &c.kernel {
                let w = Self::jump_integrand(a, c.small, u);
                out.axpy_mut(-w, &lift(k));
            }
        }
        out
    }

    /// `R_hat(u) - 1/2 h (x) h` with the bilinear outer product.
    pub fn joint_rhs<T: Scalar>(&self, h: &CurveCoeffs<T>, u: &SymOp<T>) -> Result<SymOp<T>> {
        self.check_dim(u)?;
        if h.len() != self.dim() {
            return Err(Error::Shape(format!("curve functional of length {} for dimension {}", h.len(), self.dim())));
        }
        let mut out = self.rhat_unchecked(u);
        out.axpy_mut(T::from_real(-0.5), &SymOp::outer(h));
        Ok(out)
    }

    /// Laplace exponent of the driving subordinator; BNS subclass only.
    pub fn levy_laplace_exponent<T: Scalar>(&self, u: &SymOp<T>) -> Result<T> {
        if !self.is_bns() {
            return Err(Error::ModelClass("Laplace exponent needs Gamma = 0 and mu = 0".into()));
        }
        self.check_dim(u)?;
        let mut acc = pair_real(&self.drift, u);
        for a in &self.m_atoms {
            let p = pair_real(&a.jump, u);
            let ind = if a.jump.norm() <= TRUNCATION_RADIUS { p } else { T::zero() };
            acc -= T::from_real(a.weight) * ((-p).exp() - T::one() + ind);
        }
        Ok(acc)
    }

    /// Total mass `sum_k mu_k` of the state-dependent measure.
    pub fn mu_total(&self) -> RealOp {
        let mut out = RealOp::zeros(self.dim());
        for a in &self.mu_atoms {
            if let Some(dir) = &a.direction {
                out.axpy_mut(a.weight, dir);
            }
        }
        out
    }

    /// Total rate `sum_k c_k` of the state-independent jumps.
    pub fn m_total_rate(&self) -> f64 {
        self.m_atoms.iter().map(|a| a.weight).sum()
    }

    /// Constant drift between jumps, `b - sum_k c_k chi(xi_k)`.
    pub fn pathwise_drift(&self) -> RealOp {
        let mut out = self.drift.clone();
        for (a, c) in self.m_atoms.iter().zip(&self.m_cache) {
            if c.small {
                out.axpy_mut(-a.weight, &a.jump);
            }
        }
        out
    }

    /// Linear drift between jumps besides the Lyapunov part:
    /// `Gamma(x) - sum_k chi(xi_k) <x, mu_k>/|xi_k|^2`.
    pub fn pathwise_linear_drift(&self, x: &RealOp) -> RealOp {
        let mut out = self.gamma.apply(x);
        for (a, c) in self.mu_atoms.iter().zip(&self.mu_cache) {
            if let (true, Some(k)) = (c.small, &c.kernel) {
                out.axpy_mut(-k.inner_unchecked(x), &a.jump);
            }
        }
        out
    }

    /// Constant part of the first-moment dynamics, `b + sum_k c_k (xi_k - chi(xi_k))`.
    pub fn mean_drift(&self) -> RealOp {
        let mut out = self.drift.clone();
        for (a, c) in self.m_atoms.iter().zip(&self.m_cache) {
            if !c.small {
                out.axpy_mut(a.weight, &a.jump);
            }
        }
        out
    }

    /// Linear part of the first-moment dynamics besides the Lyapunov part:
    /// `Gamma(x) + sum_k (xi_k - chi(xi_k)) <x, mu_k>/|xi_k|^2`.
    pub fn mean_linear_drift(&self, x: &RealOp) -> RealOp {
        let mut out = self.gamma.apply(x);
        for (a, c) in self.mu_atoms.iter().zip(&self.mu_cache) {
            if let (false, Some(k)) = (c.small, &c.kernel) {
                out.axpy_mut(k.inner_unchecked(x), &a.jump);
            }
        }
        out
    }

    /// Per-atom intensities `<x, mu_k>/|xi_k|^2` of the state-dependent jumps.
    pub fn mu_intensities(&self, x: &RealOp) -> Vec<f64> {
        self.mu_cache
            .iter()
            .map(|c| c.kernel.as_ref().map_or(0.0, |k| k.inner_unchecked(x).max(0.0)))
            .collect()
    }

    /// Finite-rank reduction to the leading `d` modes.
    ///
    /// Atoms are projected by `P_d`; atoms with `P_d xi = 0` are dropped. Atoms
    /// with `|xi| > 1` whose projection lands in the unit ball get their
    /// compensator moved into the drift (for `m`) or into a Gamma kernel term
    /// (for `mu`), so `F_d = F o P_d` and `R_hat_d = P_d o R_hat o P_d`.
    pub fn project(&self, d: usize) -> Result<Self> {
        if d == 0 || d > self.dim() {
            return Err(Error::Shape(format!("projection rank {d} outside 1..={}", self.dim())));
        }
        if d == self.dim() {
            return Ok(self.clone());
        }
        let basis = self.basis.truncated(d)?;
        let mut drift = self.drift.leading_block(d)?;
        let mut gamma = self.gamma.project(d)?;
        let mut m_atoms = Vec::new();
        for a in &self.m_atoms {
            let p = a.jump.leading_block(d)?;
            let pn = p.norm();
            if pn == 0.0 {
                continue;
            }
            if !a.is_small() && pn <= TRUNCATION_RADIUS {
                drift.axpy_mut(a.weight, &p);
            }
            m_atoms.push(JumpAtom::new(a.weight, p));
        }
        let mut mu_atoms = Vec::new();
        for (a, c) in self.mu_atoms.iter().zip(&self.mu_cache) {
            let p = a.jump.leading_block(d)?;
            let pn = p.norm();
            let Some(dir) = &a.direction else { continue };
            if pn == 0.0 {
                continue;
            }
            let pdir = dir.leading_block(d)?;
            if !c.small && pn <= TRUNCATION_RADIUS {
                let nu = pdir.scale(a.weight / a.jump.norm().powi(2));
                gamma.kernel_terms.push(KernelTerm { zeta: p.clone(), nu });
            }
            let weight = a.weight * (pn / a.jump.norm()).powi(2);
            mu_atoms.push(JumpAtom::with_direction(weight, p, pdir));
        }
        Self::new(basis, drift, gamma, m_atoms, mu_atoms)
    }

    /// Randomized admissibility report.
    pub fn validate_admissible(&self, trials: usize, seed: u64) -> ValidationReport {
        validate(self, trials.max(1), seed)
    }
}

/// Outcome of one admissibility condition.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionCheck {
    pub item: &'static str,
    pub description: &'static str,
    pub passed: bool,
    /// Smallest observed margin (condition holds when `>= -tolerance`).
    pub worst_margin: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failed_items(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.item).collect()
    }

    pub fn check(&self, item: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.item == item)
    }
}

const ADMISSIBILITY_TOL: f64 = 1e-10;

fn validate(p: &AffineParams, trials: usize, seed: u64) -> ValidationReport {
    let tol = ADMISSIBILITY_TOL;
    let mut checks = Vec::new();

    let second_moment: f64 = p.m_atoms.iter().map(|a| a.weight * a.jump.norm().powi(2)).sum();
    checks.push(ConditionCheck {
        item: "i",
        description: "second moment of m is finite",
        passed: second_moment.is_finite(),
        worst_margin: if second_moment.is_finite() { 0.0 } else { f64::NEG_INFINITY },
        samples: p.m_atoms.len(),
    });

    let inward = p.pathwise_drift().min_eigenvalue();
    checks.push(ConditionCheck {
        item: "ii",
        description: "b - int chi(xi) m(dxi) is PSD",
        passed: inward >= -tol,
        worst_margin: inward,
        samples: 1,
    });

    let pairs = orthogonal_pairs(p.dim(), trials, seed);
    let mut kernel_ok = true;
    let mut qm_worst = f64::INFINITY;
    for (x, u) in &pairs {
        let mut kernel_sum = 0.0;
        let mut qm = p.gamma.apply(x).inner_unchecked(u);
        for (a, c) in p.mu_atoms.iter().zip(&p.mu_cache) {
            if let (true, Some(k)) = (c.small, &c.kernel) {
                let term = a.jump.inner_unchecked(u) * k.inner_unchecked(x);
                kernel_sum += term;
                qm -= term;
            }
        }
        kernel_ok &= kernel_sum.is_finite();
        qm_worst = qm_worst.min(qm);
    }
    if pairs.is_empty() {
        qm_worst = 0.0;
    }
    checks.push(ConditionCheck {
        item: "iii",
        description: "int <chi(xi),u> M(x,dxi) finite on orthogonal PSD pairs",
        passed: kernel_ok,
        worst_margin: 0.0,
        samples: pairs.len(),
    });

    let lam = p.basis.eigenvalues();
    let structural = lam.iter().all(|&l| l >= 0.0) && lam.windows(2).all(|w| w[0] < w[1]);
    checks.push(ConditionCheck {
        item: "iv-a",
        description: "B e_i = -lambda_i e_i with 0 <= lambda_1 <= lambda_2 <= ...",
        passed: structural,
        worst_margin: lam.first().copied().unwrap_or(0.0),
        samples: lam.len(),
    });
    checks.push(ConditionCheck {
        item: "iv-b",
        description: "<Gamma(x),u> - int <chi(xi),u> <mu(dxi),x>/|xi|^2 >= 0 on orthogonal PSD pairs",
        passed: qm_worst >= -tol,
        worst_margin: qm_worst,
        samples: pairs.len(),
    });
    checks.push(ConditionCheck {
        item: "iv-c",
        description: "coercivity of B (Dirichlet Laplacian spectrum)",
        passed: structural && lam.first().is_some_and(|&l| l > 0.0),
        worst_margin: lam.first().copied().unwrap_or(0.0),
        samples: lam.len(),
    });

    ValidationReport { trials, seed, tolerance: tol, checks }
}

/// Unit-norm PSD pairs `(x, u)` with `<x, u> = 0`: half supported on
/// complementary blocks of a random orthogonal frame, half on coordinate axes.
fn orthogonal_pairs(d: usize, trials: usize, seed: u64) -> Vec<(RealOp, RealOp)> {
    if d < 2 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let q = if t % 2 == 0 {
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            g.qr().q()
        } else {
            let mut perm: Vec<usize> = (0..d).collect();
            for i in (1..d).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            DMatrix::from_fn(d, d, |i, j| if perm[j] == i { 1.0 } else { 0.0 })
        };
        let k = rng.random_range(1..d);
        let block_psd = |rng: &mut ChaCha8Rng, cols: std::ops::Range<usize>| {
            let w = cols.len();
            let a = DMatrix::from_fn(w, w, |_, _| rng.sample::<f64, _>(StandardNormal));
            let qb = q.columns(cols.start, w);
            let m = qb * (&a * a.transpose()) * qb.transpose();
            let s = RealOp::symmetrize(m);
            let n = s.norm();
            s.scale(1.0 / n)
        };
        let x = block_psd(&mut rng, 0..k);
        let u = block_psd(&mut rng, k..d);
        out.push((x, u));
    }
    out
}

/// Complex argument helper: `i * v` for a real curve functional.
pub fn imaginary(v: &CurveCoeffs) -> CurveCoeffs<crate::C64> {
    CurveCoeffs(v.0.map(|x| crate::C64::new(0.0, x)))
}

/// Complex lift of a real operator.
pub fn complexify(x: &RealOp) -> ComplexOp {
    x.to_complex()
}
