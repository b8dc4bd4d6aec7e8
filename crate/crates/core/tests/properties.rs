//! Randomized properties across modules.

mod common;

use common::*;
use heatvol::operator_space::RealOp;
use heatvol::pricing::{arithmetic_weight, damping_weight, flow_functional_scaled};
use heatvol::riccati::solve_covariance_riccati;
use heatvol::simulation::{mc_char_function, simulate_joint, SimConfig};
use heatvol::C64;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn sym(vals: &[f64], d: usize) -> RealOp {
    let m = DMatrix::from_fn(d, d, |i, j| vals[i * d + j]);
    RealOp::symmetrize(&m + m.transpose())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn psd_floor_is_idempotent(vals in prop::collection::vec(-1.0f64..1.0, 25)) {
        let a = sym(&vals, 5);
        let (f, clipped) = a.psd_floor().unwrap();
        prop_assert!(f.is_psd());
        prop_assert!(clipped >= 0.0);
        let (g, again) = f.psd_floor().unwrap();
        prop_assert!(g.sub(&f).unwrap().norm() <= 1e-12 * (1.0 + f.norm()));
        prop_assert!(again <= 1e-12 * (1.0 + f.norm()));
    }

    #[test]
    fn averaging_is_additive_over_windows(a in 0.0f64..0.6, w1 in 0.05f64..0.6, w2 in 0.05f64..0.6) {
        let b = basis(12);
        let (m, c) = (a + w1, a + w1 + w2);
        let whole = b.averaging_functional(a, c).unwrap().scale(c - a);
        let left = b.averaging_functional(a, m).unwrap().scale(w1);
        let right = b.averaging_functional(m, c).unwrap().scale(w2);
        for i in 0..12 {
            let sum = left.as_slice()[i] + right.as_slice()[i];
            prop_assert!((whole.as_slice()[i] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_are_conjugate_symmetric(k in 0.1f64..3.0, eta in 1.05f64..3.0, lam in 0.0f64..50.0) {
        for w in [damping_weight, arithmetic_weight] {
            let plus = w(k, eta, lam).unwrap();
            let minus = w(k, eta, -lam).unwrap();
            prop_assert!((plus - minus.conj()).norm() <= 1e-14 * (1.0 + plus.norm()));
        }
    }

    #[test]
    fn flow_functional_is_affine_in_lambda(lam in -20.0f64..20.0, eta in 1.1f64..2.5) {
        let b = basis(8);
        let m = reference_market(&b, 1.0, eta);
        let at = flow_functional_scaled(&b, &m, lam).unwrap();
        let l = b.averaging_functional(TAU1 - EXERCISE, TAU2 - EXERCISE).unwrap();
        for i in 0..8 {
            let want = C64::new(eta, lam) * l.as_slice()[i];
            prop_assert!((at.as_slice()[i] - want).norm() < 1e-13);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn riccati_stays_in_the_cone(vals in prop::collection::vec(-1.0f64..1.0, 36), t in 0.1f64..1.5) {
        let p = reference_params(6);
        let g = DMatrix::from_fn(6, 6, |i, j| vals[i * 6 + j]);
        let u2 = RealOp::symmetrize(&g * g.transpose());
        let tr = solve_covariance_riccati(&p, &u2, t, 100, 6).unwrap();
        let tol = 1e-8 * (1.0 + u2.norm());
        prop_assert!(tr.psi2.iter().all(|x| x.min_eigenvalue() >= -tol));
        // Phi is nondecreasing for PSD input since F >= 0 on the cone
        prop_assert!(tr.phi.windows(2).all(|w| w[1] >= w[0] - tol));
    }

    #[test]
    fn monte_carlo_cf_is_bounded(seed in 0u64..1000, scale in 0.0f64..5.0) {
        let d = 4;
        let p = reference_params(d);
        let b = p.basis().clone();
        let cfg = SimConfig::new(0.5, 0.1, 64, seed, d).terminal();
        let paths = simulate_joint(&p, &hump(&b), &reference_x0(d), &cfg).unwrap();
        let u1 = b.averaging_functional(0.2, 0.8).unwrap().scale(scale).to_complex().scale(C64::new(0.0, 1.0));
        let (cf, se) = mc_char_function(&paths, &u1, &RealOp::identity(d).scale(scale)).unwrap();
        prop_assert!(cf.norm() <= 1.0 + 1e-12);
        prop_assert!(se[0] >= 0.0 && se[1] >= 0.0);
    }
}
