//! Dirichlet Laplacian eigenbasis on the maturity interval `(0, theta_max)`.
//!
//! Basis functions are `e_n(x) = c_n sin(n pi x / theta_max)` with
//! `c_n = sqrt(2 / theta_max)`, orthonormal in `L^2(0, theta_max)`. Eigenvalues
//! are stored nonnegative; the generator acts as `B e_n = -lambda_n e_n`.
//!
//! Mode indices passed to the public evaluation functions are 1-based, vector
//! slots are 0-based.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::Scalar;

/// Maturity domain and truncation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    pub theta_max: f64,
    /// `0` selects the unweighted space. A positive value only rescales the
    /// eigenvalues to `(1/beta)(n pi / theta_max)^2`.
    #[serde(default)]
    pub weight_beta: f64,
    pub rank: usize,
    #[serde(default = "default_quad_nodes")]
    pub quad_nodes: usize,
}

fn default_quad_nodes() -> usize {
    12
}

impl SpaceConfig {
    pub fn new(theta_max: f64, rank: usize) -> Self {
        Self {
            theta_max,
            weight_beta: 0.0,
            rank,
            quad_nodes: default_quad_nodes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta_max.is_finite() && self.theta_max > 0.0) {
            return Err(Error::Config(format!("theta_max must be positive, got {}", self.theta_max)));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be at least 1".into()));
        }
        if !(self.weight_beta.is_finite() && self.weight_beta >= 0.0) {
            return Err(Error::Config(format!("weight_beta must be >= 0, got {}", self.weight_beta)));
        }
        if self.quad_nodes < 4 {
            return Err(Error::Config(format!("quad_nodes must be >= 4, got {}", self.quad_nodes)));
        }
        Ok(())
    }

    fn effective_beta(&self) -> f64 {
        if self.weight_beta > 0.0 {
            self.weight_beta
        } else {
            1.0
        }
    }
}

/// Coefficients `<f, e_n>` of a curve (or a linear functional) in the eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveCoeffs<T: Scalar = f64>(pub DVector<T>);

impl<T: Scalar> CurveCoeffs<T> {
    pub fn zeros(len: usize) -> Self {
        Self(DVector::from_element(len, T::zero()))
    }

    pub fn from_vec(v: Vec<T>) -> Self {
        Self(DVector::from_vec(v))
    }

    pub fn unit(len: usize, slot: usize) -> Self {
        let mut v = DVector::from_element(len, T::zero());
        v[slot] = T::one();
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        self.0.as_slice()
    }

    /// Bilinear pairing `sum_n a_n b_n` (no conjugation).
    pub fn pair(&self, other: &CurveCoeffs<T>) -> T {
        self.0.iter().zip(other.0.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self(self.0.map(|v| v * s))
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v.modulus_squared()).sum::<f64>().sqrt()
    }
}

impl CurveCoeffs<f64> {
    pub fn to_complex(&self) -> CurveCoeffs<crate::C64> {
        CurveCoeffs(self.0.map(|v| crate::C64::new(v, 0.0)))
    }
}

/// Truncated orthonormal eigenbasis.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    config: SpaceConfig,
    eigenvalues: Vec<f64>,
    norm_constants: Vec<f64>,
}

impl EigenBasis {
    pub fn new(config: SpaceConfig) -> Result<Self> {
        config.validate()?;
        let beta = config.effective_beta();
        let eigenvalues = (1..=config.rank)
            .map(|n| (n as f64 * PI / config.theta_max).powi(2) / beta)
            .collect();
        let c = (2.0 / config.theta_max).sqrt();
        Ok(Self {
            config,
            eigenvalues,
            norm_constants: vec![c; config.rank],
        })
    }

    pub fn config(&self) -> &SpaceConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.config.rank
    }

    pub fn theta_max(&self) -> f64 {
        self.config.theta_max
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// `lambda_mode` for any 1-based mode, also beyond the truncation rank.
    pub fn eigenvalue(&self, mode: usize) -> f64 {
        (mode as f64 * PI / self.config.theta_max).powi(2) / self.config.effective_beta()
    }

    pub fn norm_constants(&self) -> &[f64] {
        &self.norm_constants
    }

    /// The same basis cut down to the first `rank` modes.
    pub fn truncated(&self, rank: usize) -> Result<Self> {
        if rank == 0 || rank > self.rank() {
            return Err(Error::Shape(format!(
                "cannot truncate basis of rank {} to {}",
                self.rank(),
                rank
            )));
        }
        let config = SpaceConfig { rank, ..self.config };
        Ok(Self {
            config,
            eigenvalues: self.eigenvalues[..rank].to_vec(),
            norm_constants: self.norm_constants[..rank].to_vec(),
        })
    }

    fn wavenumber(&self, slot: usize) -> f64 {
        (slot + 1) as f64 * PI / self.config.theta_max
    }

    fn check_x(&self, x: f64) -> Result<()> {
        // allow a rounding-sized overshoot at the right end
        let tol = 1e-12 * self.config.theta_max;
        if !(x >= -tol && x <= self.config.theta_max + tol) {
            return Err(Error::Domain(format!(
                "maturity {x} outside [0, {}]",
                self.config.theta_max
            )));
        }
        Ok(())
    }

    /// Unchecked evaluation of slot `slot` (0-based); zero outside the domain.
    pub(crate) fn value(&self, slot: usize, x: f64) -> f64 {
        if x < 0.0 || x > self.config.theta_max {
            return 0.0;
        }
        self.norm_constants[slot] * (self.wavenumber(slot) * x).sin()
    }

    /// All basis values at `x` by the sine recurrence; zero outside the domain.
    pub(crate) fn values_into(&self, x: f64, out: &mut [f64]) {
        if x < 0.0 || x > self.config.theta_max {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let th = self.wavenumber(0) * x;
        let (s1, c1) = th.sin_cos();
        let two_c = 2.0 * c1;
        let (mut prev, mut cur) = (0.0, s1);
        for (n, v) in out.iter_mut().enumerate() {
            *v = self.norm_constants[n] * cur;
            let next = two_c * cur - prev;
            prev = cur;
            cur = next;
        }
    }

    /// `e_mode(x)` for a 1-based mode index.
    pub fn eval_function(&self, mode: usize, x: f64) -> Result<f64> {
        if mode == 0 || mode > self.rank() {
            return Err(Error::Shape(format!("mode {mode} outside 1..={}", self.rank())));
        }
        self.check_x(x)?;
        Ok(self.value(mode - 1, x))
    }

    /// `sum_n coeffs_n e_n(x)`.
    pub fn eval_curve(&self, coeffs: &CurveCoeffs, x: f64) -> Result<f64> {
        self.check_len(coeffs.len())?;
        self.check_x(x)?;
        Ok(coeffs
            .0
            .iter()
            .enumerate()
            .map(|(n, c)| c * self.value(n, x))
            .sum())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.rank() {
            return Err(Error::Shape(format!(
                "coefficient vector of length {len} for basis of rank {}",
                self.rank()
            )));
        }
        Ok(())
    }

    /// Least-squares coefficients of a sampled curve.
    pub fn project_curve(&self, samples: &[(f64, f64)]) -> Result<CurveCoeffs> {
        for &(x, v) in samples {
            self.check_x(x)?;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("sample value at x = {x} is not finite")));
            }
        }
        let mut xs: Vec<f64> = samples.iter().map(|s| s.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        let interior = xs.iter().filter(|&&x| x > 0.0 && x < self.theta_max()).count();
        if interior < self.rank() {
            return Err(Error::IllPosedProjection(format!(
                "{interior} distinct interior abscissae for {} unknowns",
                self.rank()
            )));
        }
        let d = self.rank();
        let design = DMatrix::from_fn(samples.len(), d, |i, n| self.value(n, samples[i].0));
        let rhs = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1));
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smax > 0.0) || smin <= 1e-10 * smax {
            return Err(Error::IllPosedProjection(format!(
                "design matrix is rank deficient (singular values {smin:e}..{smax:e})"
            )));
        }
        let sol = svd
            .solve(&rhs, 0.0)
            .map_err(|e| Error::IllPosedProjection(e.to_string()))?;
        Ok(CurveCoeffs(sol))
    }

    /// Coefficients of the shift semigroup, `S_{nm}(t) = <S(t) e_m, e_n>` with
    /// `S(t) f(x) = f(x + t)` cut off at `theta_max`.
    pub fn shift_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("shift time must be nonnegative, got {t}")));
        }
        let d = self.rank();
        if t == 0.0 {
            return Ok(DMatrix::identity(d, d));
        }
        let len = self.theta_max() - t;
        if len <= 0.0 {
            return Ok(DMatrix::zeros(d, d));
        }
        let rule = GaussLegendre::new(self.config.quad_nodes);
        let panels = d + 1;
        let mut out = DMatrix::zeros(d, d);
        let mut shifted = vec![0.0; d];
        let mut plain = vec![0.0; d];
        for (x, w) in rule.composite(0.0, len, panels) {
            for n in 0..d {
                shifted[n] = self.value(n, x + t);
                plain[n] = self.value(n, x);
            }
            for m in 0..d {
                let a = w * shifted[m];
                for n in 0..d {
                    out[(n, m)] += a * plain[n];
                }
            }
        }
        Ok(out)
    }

    fn shift_nodes(&self, t: f64) -> Result<Option<Vec<(f64, f64)>>> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("shift time must be nonnegative, got {t}")));
        }
        let len = self.theta_max() - t;
        if len <= 0.0 {
            return Ok(None);
        }
        let rule = GaussLegendre::new(self.config.quad_nodes);
        Ok(Some(rule.composite(0.0, len, self.rank() + 1)))
    }

    /// `S(t)^T u`, the coefficients of the adjoint shift applied to a functional.
    pub fn shift_adjoint_apply<T: Scalar>(&self, t: f64, u: &CurveCoeffs<T>) -> Result<CurveCoeffs<T>> {
        self.check_len(u.len())?;
        if t == 0.0 {
            return Ok(u.clone());
        }
        let d = self.rank();
        let mut out = DVector::from_element(d, T::zero());
        let Some(nodes) = self.shift_nodes(t)? else {
            return Ok(CurveCoeffs(out));
        };
        let mut plain = vec![0.0; d];
        let mut shifted = vec![0.0; d];
        for (x, w) in nodes {
            self.values_into(x, &mut plain);
            self.values_into(x + t, &mut shifted);
            let mut ux = T::zero();
            for (&un, &pn) in u.0.iter().zip(&plain) {
                ux += un * T::from_real(pn);
            }
            ux *= T::from_real(w);
            for m in 0..d {
                out[m] += ux * T::from_real(shifted[m]);
            }
        }
        Ok(CurveCoeffs(out))
    }

    /// `S(t) f`, the projected coefficients of the shifted curve.
    pub fn shift_apply(&self, t: f64, f: &CurveCoeffs) -> Result<CurveCoeffs> {
        self.check_len(f.len())?;
        if t == 0.0 {
            return Ok(f.clone());
        }
        let d = self.rank();
        let mut out = DVector::zeros(d);
        let Some(nodes) = self.shift_nodes(t)? else {
            return Ok(CurveCoeffs(out));
        };
        let mut plain = vec![0.0; d];
        let mut shifted = vec![0.0; d];
        for (x, w) in nodes {
            self.values_into(x, &mut plain);
            self.values_into(x + t, &mut shifted);
            let fx: f64 = (0..d).map(|m| f.0[m] * shifted[m]).sum::<f64>() * w;
            for n in 0..d {
                out[n] += fx * plain[n];
            }
        }
        Ok(CurveCoeffs(out))
    }

    /// Coefficients of the averaging functional `f -> (1/(b-a)) int_a^b f(z) dz`.
    pub fn averaging_functional(&self, a: f64, b: f64) -> Result<CurveCoeffs> {
        if !(a < b) {
            return Err(Error::Domain(format!("averaging window needs a < b, got [{a}, {b}]")));
        }
        self.check_x(a)?;
        self.check_x(b)?;
        let coeffs = (0..self.rank())
            .map(|n| {
                let k = self.wavenumber(n);
                self.norm_constants[n] * ((k * a).cos() - (k * b).cos()) / (k * (b - a))
            })
            .collect();
        Ok(CurveCoeffs::from_vec(coeffs))
    }

    /// Gram matrix of the basis computed by quadrature; identity up to rounding.
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let d = self.rank();
        let rule = GaussLegendre::new(self.config.quad_nodes);
        let mut g = DMatrix::zeros(d, d);
        for (x, w) in rule.composite(0.0, self.theta_max(), d + 1) {
            for m in 0..d {
                let a = w * self.value(m, x);
                for n in 0..d {
                    g[(m, n)] += a * self.value(n, x);
                }
            }
        }
        g
    }
}

/// Convenience wrapper mirroring [`EigenBasis::new`].
pub fn build_basis(config: SpaceConfig) -> Result<EigenBasis> {
    EigenBasis::new(config)
}
