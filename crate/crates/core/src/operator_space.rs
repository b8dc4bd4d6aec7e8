//! Symmetric finite-rank operators in eigenbasis coordinates.
//!
//! A [`SymOp`] of dimension `d` is the matrix of an operator on `span(e_1..e_d)`
//! with respect to `e_i (x) e_j`. The Hilbert-Schmidt inner product becomes the
//! entrywise sum `sum a_ij b_ij`; for complex entries the pairing stays bilinear
//! so that real states can be paired with complex Riccati arguments.

use nalgebra::{DMatrix, SymmetricEigen};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral_basis::{CurveCoeffs, EigenBasis};
use crate::{Scalar, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct SymOp<T: Scalar = f64> {
    m: DMatrix<T>,
}

pub type RealOp = SymOp<f64>;
pub type ComplexOp = SymOp<C64>;

impl<T: Scalar> SymOp<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { m: DMatrix::from_element(dim, dim, T::zero()) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { m: DMatrix::identity(dim, dim) }
    }

    /// Operator with a single unit entry at `(i, j)` and `(j, i)`.
    pub fn unit(dim: usize, i: usize, j: usize) -> Self {
        let mut m = DMatrix::from_element(dim, dim, T::zero());
        m[(i, j)] = T::one();
        m[(j, i)] = T::one();
        Self { m }
    }

    pub fn diag(values: &[T]) -> Self {
        let n = values.len();
        let mut m = DMatrix::from_element(n, n, T::zero());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        Self { m }
    }

    /// Accepts a square matrix that is symmetric up to `1e-10` relative
    /// asymmetry; the lower triangle is then overwritten by the upper one.
    pub fn new(m: DMatrix<T>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
        }
        let scale = m.iter().map(|v| v.modulus()).fold(0.0, f64::max);
        for i in 0..m.nrows() {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).modulus() > 1e-10 * (1.0 + scale) {
                    return Err(Error::Shape(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self::from_upper(m))
    }

    /// Builds from any square matrix by averaging with its transpose.
    pub fn symmetrize(m: DMatrix<T>) -> Self {
        let t = m.transpose();
        let half = T::from_real(0.5);
        Self::from_upper((m + t) * half)
    }

    fn from_upper(mut m: DMatrix<T>) -> Self {
        let n = m.nrows();
        for i in 0..n {
            for j in 0..i {
                m[(i, j)] = m[(j, i)];
            }
        }
        Self { m }
    }

    pub(crate) fn from_matrix_unchecked(m: DMatrix<T>) -> Self {
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.m[(i, j)]
    }

    fn check_dim(&self, other: &Self) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape(format!("dimensions {} and {} differ", self.dim(), other.dim())));
        }
        Ok(())
    }

    /// Bilinear Hilbert-Schmidt pairing `sum_ij a_ij b_ij`.
    pub fn hs_inner(&self, other: &Self) -> Result<T> {
        self.check_dim(other)?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &Self) -> T {
        self.m.iter().zip(other.m.iter()).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
    }

    /// Hilbert-Schmidt (Frobenius) norm.
    pub fn norm(&self) -> f64 {
        self.m.iter().map(|v| v.modulus_squared()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> T {
        self.m.trace()
    }

    pub fn is_finite(&self) -> bool {
        self.m.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, s: T) -> Self {
        Self { m: &self.m * s }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self { m: &self.m + &other.m })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dim(other)?;
        Ok(Self { m: &self.m - &other.m })
    }

    pub(crate) fn axpy_mut(&mut self, a: T, other: &Self) {
        self.m.zip_apply(&other.m, |x, y| *x += a * y);
    }

    /// Bilinear rank-one product `(h (x) h)_{mn} = h_m h_n`.
    pub fn outer(h: &CurveCoeffs<T>) -> Self {
        let v = &h.0;
        Self { m: v * v.transpose() }
    }

    /// Keeps the leading `k x k` block and zeroes everything else.
    pub fn project_rank(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.dim() {
            return Err(Error::Shape(format!("projection rank {k} outside 1..={}", self.dim())));
        }
        let mut m = self.m.clone();
        let d = self.dim();
        for i in 0..d {
            for j in 0..d {
                if i >= k || j >= k {
                    m[(i, j)] = T::zero();
                }
            }
        }
        Ok(Self { m })
    }

    /// `P_k^perp a = a - P_k a`.
    pub fn project_rank_complement(&self, k: usize) -> Result<Self> {
        let p = self.project_rank(k)?;
        Ok(Self { m: &self.m - p.m })
    }

    /// Leading `k x k` block as a `k`-dimensional operator.
    pub fn leading_block(&self, k: usize) -> Result<Self> {
        if k > self.dim() {
            return Err(Error::Shape(format!("block {k} exceeds dimension {}", self.dim())));
        }
        Ok(Self { m: self.m.view((0, 0), (k, k)).into_owned() })
    }

    /// Zero-padded embedding into dimension `dim >= self.dim()`.
    pub fn embed(&self, dim: usize) -> Result<Self> {
        if dim < self.dim() {
            return Err(Error::Shape(format!("cannot embed dimension {} into {dim}", self.dim())));
        }
        let mut m = DMatrix::from_element(dim, dim, T::zero());
        m.view_mut((0, 0), (self.dim(), self.dim())).copy_from(&self.m);
        Ok(Self { m })
    }

    /// `L(a) = B a + a B^*` with `B = diag(-lambda)`.
    pub fn lyapunov_apply(&self, basis: &EigenBasis) -> Result<Self> {
        let lam = lyapunov_eigs(basis, self.dim())?;
        let mut m = self.m.clone();
        for ((i, j), v) in indexed(&mut m) {
            *v *= T::from_real(-(lam[i] + lam[j]));
        }
        Ok(Self { m })
    }

    /// `T(t) a = e^{tB} a e^{tB}`, entrywise `e^{-(lambda_m + lambda_n) t} a_mn`.
    pub fn semigroup_apply(&self, basis: &EigenBasis, t: f64) -> Result<Self> {
        if !(t >= 0.0) {
            return Err(Error::Domain(format!("semigroup time must be nonnegative, got {t}")));
        }
        let lam = lyapunov_eigs(basis, self.dim())?;
        let decay: Vec<f64> = lam.iter().map(|l| (-l * t).exp()).collect();
        let mut m = self.m.clone();
        for ((i, j), v) in indexed(&mut m) {
            *v *= T::from_real(decay[i] * decay[j]);
        }
        Ok(Self { m })
    }
}

fn indexed<T: Scalar>(m: &mut DMatrix<T>) -> impl Iterator<Item = ((usize, usize), &mut T)> {
    let rows = m.nrows();
    m.iter_mut().enumerate().map(move |(k, v)| ((k % rows, k / rows), v))
}

fn lyapunov_eigs(basis: &EigenBasis, dim: usize) -> Result<&[f64]> {
    if dim > basis.rank() {
        return Err(Error::Shape(format!(
            "operator of dimension {dim} exceeds basis rank {}",
            basis.rank()
        )));
    }
    Ok(&basis.eigenvalues()[..dim])
}

/// Tolerance used for PSD checks: `scale * (1 + |trace|)`.
pub fn psd_tolerance(a: &RealOp, scale: f64) -> f64 {
    scale * (1.0 + a.trace().abs())
}

impl SymOp<f64> {
    pub fn to_complex(&self) -> ComplexOp {
        SymOp { m: self.m.map(|v| C64::new(v, 0.0)) }
    }

    pub fn eigen(&self) -> SymmetricEigen<f64, nalgebra::Dyn> {
        SymmetricEigen::new(self.m.clone())
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.m.symmetric_eigenvalues().min()
    }

    /// PSD within `1e-10 (1 + trace)`.
    pub fn is_psd(&self) -> bool {
        self.min_eigenvalue() >= -psd_tolerance(self, 1e-10)
    }

    /// Nearest PSD operator in Frobenius norm; returns the clipped eigenvalue mass.
    pub fn psd_floor(&self) -> Result<(Self, f64)> {
        if !self.is_finite() {
            return Err(Error::Numeric("psd_floor on non-finite operator".into()));
        }
        let eig = self.eigen();
        let clipped: f64 = eig.eigenvalues.iter().filter(|&&v| v < 0.0).map(|v| -v).sum();
        if clipped == 0.0 {
            return Ok((self.clone(), 0.0));
        }
        let vals = eig.eigenvalues.map(|v| v.max(0.0));
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        Ok((Self::symmetrize(m), clipped))
    }

    /// Symmetric PSD square root. Eigenvalues in `[-1e-8 (1 + trace), 0)` are
    /// treated as zero.
    pub fn sqrt_psd(&self) -> Result<Self> {
        if !self.is_finite() {
            return Err(Error::Numeric("sqrt_psd on non-finite operator".into()));
        }
        let eig = self.eigen();
        let tol = psd_tolerance(self, 1e-8);
        let min = eig.eigenvalues.min();
        if min < -tol {
            return Err(Error::NotPsd { min_eig: min, tol });
        }
        let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let m = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
        Ok(Self::symmetrize(m))
    }

    /// Diagnostic norm `sum (1 + lambda_m + lambda_n) |a_mn|^2`, square-rooted.
    pub fn weighted_norm(&self, basis: &EigenBasis) -> Result<f64> {
        let lam = lyapunov_eigs(basis, self.dim())?;
        let mut s = 0.0;
        for i in 0..self.dim() {
            for j in 0..self.dim() {
                s += (1.0 + lam[i] + lam[j]) * self.m[(i, j)].powi(2);
            }
        }
        Ok(s.sqrt())
    }
}

impl SymOp<C64> {
    pub fn real_part(&self) -> RealOp {
        SymOp { m: self.m.map(|v| v.re) }
    }

    pub fn max_imag(&self) -> f64 {
        self.m.iter().map(|v| v.im.abs()).fold(0.0, f64::max)
    }
}

/// JSON layout: dimension plus row-major entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SymOpRecord {
    pub dim: usize,
    pub entries: Vec<f64>,
}

impl From<&RealOp> for SymOpRecord {
    fn from(a: &RealOp) -> Self {
        let d = a.dim();
        let mut entries = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                entries.push(a.get(i, j));
            }
        }
        Self { dim: d, entries }
    }
}

impl TryFrom<SymOpRecord> for RealOp {
    type Error = Error;
    fn try_from(r: SymOpRecord) -> Result<Self> {
        if r.entries.len() != r.dim * r.dim {
            return Err(Error::Shape(format!(
                "{} entries for dimension {}",
                r.entries.len(),
                r.dim
            )));
        }
        SymOp::new(DMatrix::from_row_slice(r.dim, r.dim, &r.entries))
    }
}

impl Serialize for RealOp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SymOpRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for RealOp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SymOpRecord::deserialize(d)?;
        RealOp::try_from(r).map_err(serde::de::Error::custom)
    }
}

/// Free-function form of [`SymOp::hs_inner`].
pub fn hs_inner<T: Scalar>(a: &SymOp<T>, b: &SymOp<T>) -> Result<T> {
    a.hs_inner(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral_basis::SpaceConfig;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn basis(d: usize) -> EigenBasis {
        EigenBasis::new(SpaceConfig::new(PI, d)).unwrap()
    }

    fn sym_from(d: usize, vals: &[f64]) -> RealOp {
        let mut m = DMatrix::zeros(d, d);
        let mut k = 0;
        for i in 0..d {
            for j in i..d {
                m[(i, j)] = vals[k];
                m[(j, i)] = vals[k];
                k += 1;
            }
        }
        SymOp::new(m).unwrap()
    }

    fn psd_from(d: usize, vals: &[f64]) -> RealOp {
        let g = DMatrix::from_row_slice(d, d, &vals[..d * d]);
        SymOp::symmetrize(&g * g.transpose())
    }

    #[test]
    fn inner_products() {
        let i2 = RealOp::identity(2);
        assert_eq!(i2.hs_inner(&i2).unwrap(), 2.0);
        assert_eq!(i2.hs_inner(&RealOp::zeros(2)).unwrap(), 0.0);
        let a = sym_from(2, &[1.0, 2.0, 3.0]);
        let b = sym_from(2, &[0.0, 1.0, 0.0]);
        // Tr(BA) by direct 2x2 multiplication
        let ba = b.matrix() * a.matrix();
        assert_eq!(a.hs_inner(&b).unwrap(), ba.trace());
        assert_eq!(a.hs_inner(&b).unwrap(), 4.0);
        assert!(matches!(a.hs_inner(&RealOp::zeros(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_asymmetric_input() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(SymOp::new(m).is_err());
    }

    #[test]
    fn lyapunov_on_unit_slot() {
        let b = EigenBasis::new(SpaceConfig::new(PI, 2)).unwrap();
        let e12 = RealOp::unit(2, 0, 1);
        let out = e12.lyapunov_apply(&b).unwrap();
        assert_eq!(out, e12.scale(-5.0));
        assert_eq!(RealOp::zeros(2).lyapunov_apply(&b).unwrap(), RealOp::zeros(2));
    }

    #[test]
    fn lyapunov_matches_matrix_product() {
        let b = basis(3);
        let a = sym_from(3, &[0.3, -1.2, 0.5, 2.0, 0.7, -0.4]);
        let bm = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
            b.eigenvalues().iter().map(|l| -l).collect(),
        ));
        let oracle = &bm * a.matrix() + a.matrix() * bm.transpose();
        let out = a.lyapunov_apply(&b).unwrap();
        assert!((out.matrix() - oracle).abs().max() < 1e-13);
    }

    #[test]
    fn semigroup_on_unit_slot() {
        let b = basis(2);
        let e12 = RealOp::unit(2, 0, 1);
        let out = e12.semigroup_apply(&b, 0.1).unwrap();
        // congruence with the matrix exponential e^{tB}
        let et = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![(-0.1f64).exp(), (-0.4f64).exp()]));
        let oracle = &et * e12.matrix() * &et;
        assert!((out.matrix() - &oracle).abs().max() < 1e-15);
        assert!((out.get(0, 1) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(e12.semigroup_apply(&b, 0.0).unwrap(), e12);
        assert!(e12.semigroup_apply(&b, -1.0).is_err());
    }

    #[test]
    fn projection_basics() {
        let a = sym_from(2, &[1.0, 2.0, 3.0]);
        assert_eq!(a.project_rank(2).unwrap(), a);
        assert_eq!(a.project_rank(1).unwrap(), RealOp::diag(&[1.0, 0.0]));
        assert!(a.project_rank(0).is_err());
        assert!(a.project_rank(3).is_err());
    }

    #[test]
    fn psd_floor_cases() {
        let (out, mass) = RealOp::diag(&[1.0, -1.0]).psd_floor().unwrap();
        assert!((out.matrix() - RealOp::diag(&[1.0, 0.0]).matrix()).abs().max() < 1e-14);
        assert!((mass - 1.0).abs() < 1e-14);
        let p = RealOp::diag(&[2.0, 0.5]);
        let (same, zero) = p.psd_floor().unwrap();
        assert_eq!(same, p);
        assert_eq!(zero, 0.0);
        let mut bad = DMatrix::<f64>::identity(2, 2);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(RealOp::symmetrize(bad).psd_floor(), Err(Error::Numeric(_))));
    }

    #[test]
    fn sqrt_cases() {
        let r = RealOp::diag(&[4.0, 9.0]).sqrt_psd().unwrap();
        assert!((r.matrix() - RealOp::diag(&[2.0, 3.0]).matrix()).abs().max() < 1e-14);
        assert_eq!(RealOp::zeros(3).sqrt_psd().unwrap(), RealOp::zeros(3));
        assert!(matches!(RealOp::diag(&[1.0, -0.5]).sqrt_psd(), Err(Error::NotPsd { .. })));
    }

    proptest! {
        #[test]
        fn psd_floor_is_frobenius_projection(vals in prop::collection::vec(-2.0f64..2.0, 10)) {
            let a = sym_from(4, &vals);
            let (p, _) = a.psd_floor().unwrap();
            prop_assert!(p.min_eigenvalue() >= -1e-12);
            // brute force: clip eigenvalues of an independently computed decomposition
            let eig = nalgebra::linalg::SymmetricEigen::try_new(a.matrix().clone(), 1e-15, 0).unwrap();
            let clipped = eig.eigenvalues.map(|v| v.max(0.0));
            let oracle = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            prop_assert!((p.matrix() - oracle).abs().max() < 1e-10);
            // no PSD perturbation gets closer
            let q = p.add(&RealOp::identity(4).scale(1e-3)).unwrap();
            prop_assert!(a.sub(&p).unwrap().norm() <= a.sub(&q).unwrap().norm() + 1e-12);
        }

        #[test]
        fn sqrt_reconstructs(vals in prop::collection::vec(-1.5f64..1.5, 16)) {
            let a = psd_from(4, &vals);
            let r = a.sqrt_psd().unwrap();
            let back = r.matrix() * r.matrix();
            prop_assert!((back - a.matrix()).abs().max() <= 1e-10 * (1.0 + a.norm()));
        }

        #[test]
        fn semigroup_preserves_cone(vals in prop::collection::vec(-1.0f64..1.0, 25), t in 0.0f64..2.0) {
            let b = basis(5);
            let a = psd_from(5, &vals);
            prop_assert!(a.semigroup_apply(&b, t).unwrap().min_eigenvalue() >= -1e-12);
        }

        #[test]
        fn diagonal_maps_commute_with_projection(vals in prop::collection::vec(-1.0f64..1.0, 15), k in 1usize..=5, t in 0.0f64..1.0) {
            let b = basis(5);
            let a = sym_from(5, &vals);
            let l1 = a.lyapunov_apply(&b).unwrap().project_rank(k).unwrap();
            let l2 = a.project_rank(k).unwrap().lyapunov_apply(&b).unwrap();
            prop_assert_eq!(l1, l2);
            let s1 = a.semigroup_apply(&b, t).unwrap().project_rank(k).unwrap();
            let s2 = a.project_rank(k).unwrap().semigroup_apply(&b, t).unwrap();
            prop_assert_eq!(s1, s2);
        }

        #[test]
        fn semigroup_law(vals in prop::collection::vec(-1.0f64..1.0, 15), t in 0.0f64..1.0, s in 0.0f64..1.0) {
            let b = basis(5);
            let a = sym_from(5, &vals);
            let lhs = a.semigroup_apply(&b, s).unwrap().semigroup_apply(&b, t).unwrap();
            let rhs = a.semigroup_apply(&b, t + s).unwrap();
            prop_assert!((lhs.matrix() - rhs.matrix()).abs().max() <= 1e-14 * (1.0 + a.norm()));
        }

        #[test]
        fn complement_norm_nonincreasing(vals in prop::collection::vec(-1.0f64..1.0, 21)) {
            let a = sym_from(6, &vals);
            let mut prev = f64::INFINITY;
            for k in 1..=6 {
                let n = a.project_rank_complement(k).unwrap().norm();
                prop_assert!(n <= prev + 1e-15);
                prop_assert!(a.project_rank(k).unwrap().norm() <= a.norm() + 1e-15);
                prev = n;
            }
        }
    }

    #[test]
    fn generator_finite_difference() {
        // trace-class test operator, entries ~ 1/(mn)^4
        let b = basis(16);
        let a = SymOp::new(DMatrix::from_fn(16, 16, |i, j| {
            let (m, n) = ((i + 1) as f64, (j + 1) as f64);
            (1.0 + 0.3 * ((m * n).sin())) / (m * n).powi(4)
        }))
        .unwrap();
        let h = 1e-4;
        let fd = (a.semigroup_apply(&b, 2.0 * h).unwrap().matrix() - a.matrix()) / (2.0 * h);
        let exact = a.semigroup_apply(&b, h).unwrap().lyapunov_apply(&b).unwrap();
        let rel = (fd - exact.matrix()).norm() / exact.norm();
        assert!(rel < 1e-6, "{rel}");
    }

    #[test]
    fn json_round_trip() {
        let a = sym_from(3, &[1.0, 0.5, -0.25, 2.0, 0.0, 3.0]);
        let s = serde_json::to_string(&a).unwrap();
        let back: RealOp = serde_json::from_str(&s).unwrap();
        assert_eq!(a, back);
    }
}
