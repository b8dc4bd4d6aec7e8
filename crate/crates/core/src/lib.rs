//! Heat-modulated affine stochastic covariance models for forward curves.
//!
//! The forward curve lives on a bounded maturity interval and is expanded in the
//! Dirichlet Laplacian eigenbasis. Its instantaneous covariance is an affine
//! process on the cone of positive finite-rank operators whose linear drift is
//! the Lyapunov lift of the Laplacian. The crate provides:
//!
//! * [`spectral_basis`]: eigenbasis, curve projection, shift semigroup, averaging functionals;
//! * [`operator_space`]: symmetric operator coordinates, Lyapunov semigroup, cone utilities;
//! * [`affine_params`]: admissible parameter sets and the Riccati right-hand sides;
//! * [`riccati`]: spectral Galerkin solvers for the generalized Riccati equations;
//! * [`simulation`]: Monte Carlo paths of the covariance and forward-curve processes;
//! * [`pricing`]: Fourier pricing of calls on flow forwards and rank-robustness studies;
//! * [`cli`]: the `heatvol` command-line front end.

// `!(x > 0.0)` is used on purpose so that NaN is rejected as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod affine_params;
pub mod cli;
pub mod error;
pub mod operator_space;
pub mod quadrature;
pub mod pricing;
pub mod riccati;
pub mod rng;
pub mod simulation;
pub mod spectral_basis;

pub use error::{Error, Result};

pub type C64 = num_complex::Complex64;

/// Entry type of curve coefficients and operators: `f64` or [`C64`].
pub trait Scalar: nalgebra::ComplexField<RealField = f64> + Copy {}

impl Scalar for f64 {}
impl Scalar for C64 {}
