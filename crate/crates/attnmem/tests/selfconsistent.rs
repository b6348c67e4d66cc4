//! Fixed-point solver: re-substitution, basin independence, symmetry and derivatives.

use approx::assert_relative_eq;
use attnmem::experiments::logspace;
use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::selfconsistent::{
    analytic_derivatives, derivatives, fd_derivatives, fixed_point_map, initial_state, relative_gap, scaled_defect,
    solve, solve_from, DerivativeSource, NoiseSystemParams, SolverOptions, TailDerivativeForm,
};
use proptest::prelude::*;

fn tanh_params(c: f64, gamma: f64) -> NoiseSystemParams {
    let mo = moments(&Nonlinearity::tanh(), DEFAULT_NODES).unwrap();
    NoiseSystemParams::from_moments(c, gamma, &mo).unwrap()
}

#[test]
fn converged_state_resubstitutes() {
    let opts = SolverOptions::default();
    for (c, gamma) in [(0.25, 0.01), (1.0, 1.0), (4.0, 10.0)] {
        let params = tanh_params(c, gamma);
        let s = solve(&params, &opts).unwrap();
        assert!(s.converged);
        assert!(s.residual < opts.tol);
        let again = fixed_point_map(&params, &s.core()).unwrap();
        assert!(scaled_defect(&again, &s.core()) < 10.0 * opts.tol, "c={c}, gamma={gamma}");
    }
}

#[test]
fn damping_does_not_change_the_solution() {
    for (c, gamma) in [(0.25, 0.1), (1.0, 1.0), (4.0, 0.01)] {
        let params = tanh_params(c, gamma);
        let slow = solve(&params, &SolverOptions { damping: 0.3, ..SolverOptions::default() }).unwrap();
        let fast = solve(&params, &SolverOptions { damping: 0.7, ..SolverOptions::default() }).unwrap();
        for (a, b) in slow.core().iter().zip(fast.core()) {
            assert!((a - b).abs() < 1e-9, "c={c}, gamma={gamma}: {a} vs {b}");
        }
    }
}

#[test]
fn different_starting_points_reach_the_same_state() {
    let params = tanh_params(1.0, 0.5);
    let opts = SolverOptions::default();
    let base = solve(&params, &opts).unwrap();
    let mut start = initial_state(&params);
    start[0] *= 0.5;
    start[3] = 0.05;
    let other = solve_from(&params, &opts, start).unwrap();
    for (a, b) in base.core().iter().zip(other.core()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sign_flip_of_a1_keeps_even_quantities() {
    let opts = SolverOptions::default();
    for (c, gamma) in [(0.25, 0.01), (4.0, 1.0)] {
        let plus = solve(&tanh_params(c, gamma), &opts).unwrap();
        let p = tanh_params(c, gamma);
        let minus = solve(&NoiseSystemParams::new(c, gamma, -p.a1, p.nu).unwrap(), &opts).unwrap();
        assert_relative_eq!(plus.m, minus.m, max_relative = 1e-10);
        // Traces with an odd number of K factors (δ1, δ2, δ6) flip sign.
        for k in 0..7 {
            let sign = if matches!(k, 0 | 1 | 5) { -1.0 } else { 1.0 };
            assert_relative_eq!(plus.delta[k], sign * minus.delta[k], max_relative = 1e-9);
        }
    }
}

#[test]
fn m_decreases_strictly_in_gamma() {
    let opts = SolverOptions::default();
    for c in [0.25, 1.0, 4.0] {
        let ms: Vec<f64> = logspace(1e-2, 1e3, 30).into_iter().map(|g| solve(&tanh_params(c, g), &opts).unwrap().m).collect();
        assert!(ms.windows(2).all(|w| w[1] < w[0]), "c={c}: {ms:?}");
    }
}

#[test]
fn large_gamma_matches_the_zero_coupling_limit() {
    let params = tanh_params(2.0, 1e6);
    let s = solve(&params, &SolverOptions::default()).unwrap();
    let m0 = initial_state(&params)[0];
    assert_relative_eq!(s.m, m0, max_relative = 1e-6);
    assert_relative_eq!(s.m * params.gamma / params.c, 1.0, max_relative = 1e-5);
}

#[test]
fn analytic_derivatives_match_finite_differences() {
    let opts = SolverOptions::default();
    for (c, gamma) in [(0.25, 0.1), (1.0, 1.0), (4.0, 3.0)] {
        let params = tanh_params(c, gamma);
        let s = solve(&params, &opts).unwrap();
        let analytic = analytic_derivatives(&s, &params, TailDerivativeForm::Direct).unwrap();
        let fd = fd_derivatives(&params, &opts).unwrap();
        assert!(relative_gap(&analytic, &fd) < 1e-4, "c={c}, gamma={gamma}");
        assert!(analytic.mp < 0.0);
        let gated = derivatives(&s, &params, &opts).unwrap();
        assert_eq!(gated.source, DerivativeSource::Analytic);
    }
}

#[test]
fn rejects_invalid_parameters() {
    assert!(NoiseSystemParams::new(0.0, 1.0, 0.5, 0.5).is_err());
    assert!(NoiseSystemParams::new(1.0, -1.0, 0.5, 0.5).is_err());
    assert!(NoiseSystemParams::new(1.0, 1.0, 0.8, 0.5).is_err());
    let params = tanh_params(1.0, 1.0);
    assert!(solve(&params, &SolverOptions { damping: 0.0, ..SolverOptions::default() }).is_err());
    assert!(solve(&params, &SolverOptions { tol: 0.0, ..SolverOptions::default() }).is_err());
}

#[test]
fn zero_linear_component_is_solved_without_special_cases() {
    let mo = moments(&Nonlinearity::cos(), DEFAULT_NODES).unwrap();
    let params = NoiseSystemParams::from_moments(1.0, 1.0, &mo).unwrap();
    let s = solve(&params, &SolverOptions::default()).unwrap();
    assert!(s.m > 0.0 && s.residual < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solve_is_deterministic_and_consistent(log_c in -1.3f64..1.3, log_g in -1.5f64..2.0) {
        let params = tanh_params(10f64.powf(log_c), 10f64.powf(log_g));
        let opts = SolverOptions::default();
        let a = solve(&params, &opts).unwrap();
        let b = solve(&params, &opts).unwrap();
        prop_assert_eq!(a.core(), b.core());
        prop_assert!(a.m > 0.0);
        let fx = fixed_point_map(&params, &a.core()).unwrap();
        prop_assert!(scaled_defect(&fx, &a.core()) < 10.0 * opts.tol);
    }
}
