//! Fourier pricing of calls on flow forwards.
//!
//! The flow forward `F = l(f_t)` with `l` the average over
//! `[tau1 - t, tau2 - t]` is an affine functional of the curve, so its
//! exponential moments `E exp(z F)`, `z = eta + i lambda`, come from the joint
//! Riccati system with `u1 = z l` and `u2 = 0`. A call is priced by damped
//! Fourier inversion
//!
//! `price = (1/pi) int_0^inf Re[ w(lambda) E exp(z F) ] dlambda`.
//!
//! The default payoff is the arithmetic call `(F - K)^+` with weight
//! `w = e^{-zK} / z^2`. The exponential call `(e^F - K)^+` uses
//! `w = K^{-(eta - 1 + i lambda)} / ((eta + i lambda)(eta - 1 + i lambda))`.
//!
//! A Gaussian with the exact mean and variance of `F` serves as a control
//! variate: its price is known in closed form and only the difference of the
//! two transforms is integrated numerically.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine_params::AffineParams;
use crate::error::{Error, Result};
use crate::operator_space::RealOp;
use crate::quadrature::GaussLegendre;
use crate::riccati::{default_steps, mean_covariance, GalerkinSolver};
use crate::spectral_basis::{CurveCoeffs, EigenBasis};
use crate::C64;

/// Option and initial state.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketSpec {
    pub f0: CurveCoeffs,
    pub x0: RealOp,
    pub exercise_t: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub strike: f64,
    pub eta: f64,
}

impl MarketSpec {
    pub fn new(f0: CurveCoeffs, x0: RealOp, exercise_t: f64, tau1: f64, tau2: f64, strike: f64, eta: f64) -> Self {
        Self { f0, x0, exercise_t, tau1, tau2, strike, eta }
    }

    /// Delivery window in time-to-maturity at exercise.
    pub fn window(&self) -> (f64, f64) {
        (self.tau1 - self.exercise_t, self.tau2 - self.exercise_t)
    }

    pub fn with_strike(&self, strike: f64) -> Self {
        Self { strike, ..self.clone() }
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self { eta, ..self.clone() }
    }

    pub fn validate(&self, basis: &EigenBasis) -> Result<()> {
        let (t, a, b) = (self.exercise_t, self.tau1, self.tau2);
        if !(t > 0.0 && t < a && a < b) {
            return Err(Error::Domain(format!("need 0 < t < tau1 < tau2, got t={t}, tau1={a}, tau2={b}")));
        }
        if b - t > basis.theta_max() * (1.0 + 1e-12) {
            return Err(Error::Domain(format!(
                "tau2 - t = {} exceeds the maturity domain {}",
                b - t,
                basis.theta_max()
            )));
        }
        if !(self.strike > 0.0) {
            return Err(Error::Domain(format!("strike must be positive, got {}", self.strike)));
        }
        if !(self.eta > 1.0) {
            return Err(Error::Damping(self.eta));
        }
        if self.f0.len() != basis.rank() {
            return Err(Error::Shape(format!("f0 has length {}, basis rank is {}", self.f0.len(), basis.rank())));
        }
        if !self.x0.is_psd() {
            return Err(Error::NotPsd { min_eig: self.x0.min_eigenvalue(), tol: 1e-10 });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Payoff {
    /// `(F - K)^+`.
    #[default]
    Arithmetic,
    /// `(e^F - K)^+`.
    Exponential,
}

/// Truncation and node count of the inversion integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadSpec {
    /// `None` picks `clamp(12 / s, 50, 5000)` with `s` a lower standard deviation proxy.
    #[serde(default)]
    pub lambda_max: Option<f64>,
    #[serde(default = "default_nodes")]
    pub n_nodes: usize,
    #[serde(default)]
    pub payoff: Payoff,
}

fn default_nodes() -> usize {
    512
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self { lambda_max: None, n_nodes: default_nodes(), payoff: Payoff::Arithmetic }
    }
}

impl QuadSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda_max {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Config(format!("lambda_max must be positive, got {l}")));
            }
        }
        if self.n_nodes < 16 {
            return Err(Error::Config(format!("n_nodes must be >= 16, got {}", self.n_nodes)));
        }
        Ok(())
    }
}

/// Galerkin rank and step count of the Riccati solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RiccatiConfig {
    #[serde(default)]
    pub rank: Option<usize>,
    #[serde(default)]
    pub steps: Option<usize>,
}

/// `K^{-(eta - 1 + i lambda)} / ((eta + i lambda)(eta - 1 + i lambda))`.
pub fn damping_weight(strike: f64, eta: f64, lambda: f64) -> Result<C64> {
    if !(eta > 1.0) {
        return Err(Error::Damping(eta));
    }
    if !(strike > 0.0) {
        return Err(Error::Domain(format!("strike must be positive, got {strike}")));
    }
    let z = C64::new(eta, lambda);
    let zm = C64::new(eta - 1.0, lambda);
    Ok((-zm * strike.ln()).exp() / (z * zm))
}

/// `e^{-(eta + i lambda) K} / (eta + i lambda)^2`, the weight of `(F - K)^+`.
pub fn arithmetic_weight(strike: f64, eta: f64, lambda: f64) -> Result<C64> {
    if !(eta > 0.0) {
        return Err(Error::Damping(eta));
    }
    let z = C64::new(eta, lambda);
    Ok((-z * strike).exp() / (z * z))
}

/// `(eta + i lambda) l` with `l` the averaging functional of the delivery window.
pub fn flow_functional_scaled(basis: &EigenBasis, market: &MarketSpec, lambda: f64) -> Result<CurveCoeffs<C64>> {
    let (a, b) = market.window();
    let ell = basis.averaging_functional(a, b.min(basis.theta_max()))?;
    Ok(ell.to_complex().scale(C64::new(market.eta, lambda)))
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `E (F - K)^+` for `F ~ N(m, v)`.
pub fn bachelier_call(mean: f64, var: f64, strike: f64) -> f64 {
    let s = var.max(0.0).sqrt();
    if s == 0.0 {
        return (mean - strike).max(0.0);
    }
    let z = (mean - strike) / s;
    (mean - strike) * norm_cdf(z) + s * norm_pdf(z)
}

/// `E (e^F - K)^+` for `F ~ N(m, v)`.
pub fn lognormal_call(mean: f64, var: f64, strike: f64) -> f64 {
    let s = var.max(0.0).sqrt();
    if s == 0.0 {
        return (mean.exp() - strike).max(0.0);
    }
    let d1 = (mean - strike.ln() + var) / s;
    (mean + 0.5 * var).exp() * norm_cdf(d1) - strike * norm_cdf(d1 - s)
}

/// Simpson weights on `2n + 1` equally spaced nodes of `[0, len]`.
fn simpson(len: f64, panels2: usize) -> Vec<f64> {
    let h = len / panels2 as f64;
    (0..=panels2)
        .map(|k| {
            let c = if k == 0 || k == panels2 {
                1.0
            } else if k % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

/// Mean and variance of `F` plus the lower variance proxy used for `lambda_max`.
struct Moments {
    mean: f64,
    var: f64,
    var_low: f64,
}

fn flow_moments(
    reduced: &AffineParams,
    x0: &RealOp,
    f0: &CurveCoeffs,
    transport: &[CurveCoeffs],
    t: f64,
) -> Result<Moments> {
    let d = reduced.dim();
    let n2 = transport.len() - 1;
    let mean = f0.pair(&transport[n2]);
    let ex = mean_covariance(reduced, x0, t, n2)?;
    let low_drift = reduced.pathwise_drift().psd_floor()?.0;
    let low = mean_covariance(&AffineParams::drift_only(reduced.basis().clone(), low_drift)?, x0, t, n2)?;
    let w = simpson(t, n2);
    let (mut var, mut var_low) = (0.0, 0.0);
    for k in 0..=n2 {
        let v = CurveCoeffs(transport[n2 - k].0.rows(0, d).into_owned());
        let vv = RealOp::outer(&v);
        var += w[k] * ex[k].hs_inner(&vv)?;
        var_low += w[k] * low[k].hs_inner(&vv)?;
    }
    Ok(Moments { mean, var: var.max(0.0), var_low: var_low.max(0.0) })
}

/// Price and diagnostics of one Fourier inversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FourierPrice {
    pub price: f64,
    pub forward: f64,
    pub variance: f64,
    pub control_price: f64,
    pub lambda_max: f64,
    pub n_nodes: usize,
    pub steps: usize,
    pub rank: usize,
}

/// Call price by Fourier inversion; see the module docs.
pub fn price_call_fourier(
    params: &AffineParams,
    market: &MarketSpec,
    quad: &QuadSpec,
    riccati: &RiccatiConfig,
) -> Result<f64> {
    Ok(price_call_fourier_detailed(params, market, quad, riccati)?.price)
}

pub fn price_call_fourier_detailed(
    params: &AffineParams,
    market: &MarketSpec,
    quad: &QuadSpec,
    riccati: &RiccatiConfig,
) -> Result<FourierPrice> {
    let basis = params.basis();
    market.validate(basis)?;
    quad.validate()?;
    let d = riccati.rank.unwrap_or(params.dim());
    let solver = GalerkinSolver::new(params, d)?;
    let t = market.exercise_t;
    let steps = riccati.steps.unwrap_or_else(|| default_steps(basis, d, t));
    if steps == 0 {
        return Err(Error::Config("Riccati steps must be positive".into()));
    }
    let h = t / steps as f64;

    let (a, b) = market.window();
    let ell = basis.averaging_functional(a, b.min(basis.theta_max()))?;
    let transport: Vec<CurveCoeffs> = (0..=2 * steps)
        .map(|k| basis.shift_adjoint_apply(0.5 * h * k as f64, &ell))
        .collect::<Result<_>>()?;
    let x0 = market.x0.leading_block(d.min(market.x0.dim()))?.embed(d)?;
    let mom = flow_moments(solver.reduced_params(), &x0, &market.f0, &transport, t)?;

    let lambda_max = quad.lambda_max.unwrap_or_else(|| {
        let s = mom.var_low.sqrt();
        if s > 0.0 {
            (12.0 / s).clamp(50.0, 5000.0)
        } else {
            5000.0
        }
    });
    let eta = market.eta;
    let k = market.strike;
    let (control, shift) = match quad.payoff {
        Payoff::Arithmetic => (bachelier_call(mom.mean, mom.var, k), mom.mean - k),
        Payoff::Exponential => (lognormal_call(mom.mean, mom.var, k), mom.mean - k.ln()),
    };

    let rule = GaussLegendre::new(quad.n_nodes);
    let nodes: Vec<(f64, f64)> = rule.mapped(0.0, lambda_max).collect();
    let zero = crate::operator_space::ComplexOp::zeros(d);
    let contributions: Vec<f64> = nodes
        .par_iter()
        .map(|&(lam, w)| -> Result<f64> {
            let z = C64::new(eta, lam);
            let forcing = |i: usize| Ok(transport[i].to_complex().scale(z));
            let tr = solver.integrate(&zero, t, steps, Some(forcing), false)?;
            let psi2 = tr.psi2.last().unwrap();
            let expo = -tr.phi.last().unwrap() - crate::affine_params::pair_real(&x0, psi2);
            let gauss = 0.5 * z * z * mom.var;
            let diff = expo.exp() - gauss.exp();
            let weight = match quad.payoff {
                Payoff::Arithmetic => (z * shift).exp() / (z * z),
                Payoff::Exponential => k * (z * shift).exp() / (z * (z - 1.0)),
            };
            let v = (weight * diff).re;
            if !v.is_finite() {
                return Err(Error::Quadrature(format!("non-finite integrand at lambda = {lam}")));
            }
            Ok(w * v)
        })
        .collect::<Result<_>>()?;
    let integral: f64 = contributions.iter().sum();
    let mut price = control + integral / std::f64::consts::PI;
    let scale = match quad.payoff {
        Payoff::Arithmetic => mom.mean.abs() + k.abs(),
        Payoff::Exponential => mom.mean.exp() + k.abs(),
    };
    if price < 0.0 {
        if price < -1e-8 * (1.0 + scale) {
            return Err(Error::Quadrature(format!(
                "negative price {price:e}; increase lambda_max or n_nodes"
            )));
        }
        price = 0.0;
    }
    Ok(FourierPrice {
        price,
        forward: mom.mean,
        variance: mom.var,
        control_price: control,
        lambda_max,
        n_nodes: quad.n_nodes,
        steps,
        rank: d,
    })
}

/// One row of a rank-robustness table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RobustnessRow {
    pub d: usize,
    pub price: f64,
    pub abs_diff: f64,
    pub c_proxy: f64,
    pub runtime_ms: f64,
}

/// `(1 + lambda_1 + lambda_{d+1})^{-1/2}`, the largest `1/sqrt(1 + lambda_m + lambda_n)`
/// over index pairs outside the leading `d x d` block.
pub fn c_proxy(basis: &EigenBasis, d: usize) -> f64 {
    (1.0 + basis.eigenvalue(1) + basis.eigenvalue(d + 1)).powf(-0.5)
}

/// Prices at each rank in `d_list` against the largest one. All ranks share
/// the step count of the largest rank so differences reflect the projection only.
pub fn robustness_study(
    params: &AffineParams,
    market: &MarketSpec,
    quad: &QuadSpec,
    riccati: &RiccatiConfig,
    d_list: &[usize],
) -> Result<Vec<RobustnessRow>> {
    if d_list.is_empty() || d_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("rank list must be nonempty and strictly increasing".into()));
    }
    let d_max = *d_list.last().unwrap();
    if d_list[0] == 0 || d_max > params.dim() {
        return Err(Error::Shape(format!("ranks must lie in 1..={}", params.dim())));
    }
    let steps = riccati.steps.unwrap_or_else(|| default_steps(params.basis(), d_max, market.exercise_t));
    // a common lambda_max keeps the quadrature identical across ranks
    let reference_quad = match quad.lambda_max {
        Some(_) => *quad,
        None => {
            let cfg = RiccatiConfig { rank: Some(d_max), steps: Some(steps) };
            let lam = price_call_fourier_detailed(params, market, &QuadSpec { n_nodes: 16, ..*quad }, &cfg)?.lambda_max;
            QuadSpec { lambda_max: Some(lam), ..*quad }
        }
    };
    let mut rows = Vec::with_capacity(d_list.len());
    for &d in d_list {
        let start = Instant::now();
        let cfg = RiccatiConfig { rank: Some(d), steps: Some(steps) };
        let price = price_call_fourier(params, market, &reference_quad, &cfg)?;
        rows.push(RobustnessRow {
            d,
            price,
            abs_diff: 0.0,
            c_proxy: c_proxy(params.basis(), d),
            runtime_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    let reference = rows.last().unwrap().price;
    for r in &mut rows {
        r.abs_diff = (r.price - reference).abs();
    }
    Ok(rows)
}

/// CSV with columns `d, price, abs_diff, c_proxy, runtime_ms`.
pub fn write_robustness_csv<W: std::io::Write>(out: W, rows: &[RobustnessRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["d", "price", "abs_diff", "c_proxy", "runtime_ms"])?;
    for r in rows {
        w.write_record([
            r.d.to_string(),
            format!("{:.17e}", r.price),
            format!("{:.17e}", r.abs_diff),
            format!("{:.17e}", r.c_proxy),
            format!("{:.3}", r.runtime_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
