//! Shared scenarios for the integration tests.
#![allow(dead_code)]

use heatvol::affine_params::{AffineParams, GammaSpec, JumpAtom};
use heatvol::operator_space::RealOp;
use heatvol::pricing::MarketSpec;
use heatvol::spectral_basis::{CurveCoeffs, EigenBasis, SpaceConfig};
use nalgebra::DVector;

pub const THETA: f64 = 2.0;
pub const HORIZON: f64 = 1.0;

pub fn basis(d: usize) -> EigenBasis {
    EigenBasis::new(SpaceConfig::new(THETA, d)).unwrap()
}

/// Decaying profile `v_i = 1/(i+1)`.
pub fn profile(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| 1.0 / (i + 1) as f64)
}

/// The single m-atom of the reference scenario: `0.15 v v^T`.
pub fn reference_jump(d: usize) -> RealOp {
    let v = profile(d);
    RealOp::symmetrize(&v * v.transpose() * 0.15)
}

pub const JUMP_RATE: f64 = 2.0;

/// BNS reference model: one compensated m-atom at rate 2 and
/// `b = 2 xi + diag(0.1/(1+i))`, so `b - chi(xi) m` stays PSD.
pub fn reference_params(d: usize) -> AffineParams {
    let xi = reference_jump(d);
    let extra: Vec<f64> = (0..d).map(|i| 0.1 / (1 + i) as f64).collect();
    let drift = xi.scale(JUMP_RATE).add(&RealOp::diag(&extra)).unwrap();
    AffineParams::new(basis(d), drift, GammaSpec::default(), vec![JumpAtom::new(JUMP_RATE, xi)], vec![]).unwrap()
}

/// `0.3 + exp(-((x - 0.8)/0.4)^2)` sampled on the interior and projected.
pub fn hump(b: &EigenBasis) -> CurveCoeffs {
    let n = 400;
    let xs: Vec<(f64, f64)> = (0..n)
        .map(|k| {
            let x = b.theta_max() * (k as f64 + 0.5) / n as f64;
            (x, 0.3 + (-((x - 0.8) / 0.4f64).powi(2)).exp())
        })
        .collect();
    b.project_curve(&xs).unwrap()
}

pub fn reference_x0(d: usize) -> RealOp {
    RealOp::diag(&(0..d).map(|i| 0.2 / (1 + i) as f64).collect::<Vec<_>>())
}

pub const EXERCISE: f64 = 0.25;
pub const TAU1: f64 = 0.5;
pub const TAU2: f64 = 1.0;

pub fn reference_market(b: &EigenBasis, strike: f64, eta: f64) -> MarketSpec {
    let d = b.rank();
    MarketSpec::new(hump(b), reference_x0(d), EXERCISE, TAU1, TAU2, strike, eta)
}

/// Forward value `l(S(t) f0)` of the reference flow contract.
pub fn reference_forward(b: &EigenBasis) -> f64 {
    let l = b.averaging_functional(TAU1 - EXERCISE, TAU2 - EXERCISE).unwrap();
    l.pair(&b.shift_apply(EXERCISE, &hump(b)).unwrap())
}

/// Five strikes around the forward.
pub fn strike_ladder(b: &EigenBasis) -> Vec<f64> {
    let f = reference_forward(b);
    [0.8, 0.9, 1.0, 1.1, 1.2].iter().map(|m| m * f).collect()
}

pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = std::time::Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}
