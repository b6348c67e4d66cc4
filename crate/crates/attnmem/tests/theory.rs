//! Error predictions: ridge closed form, attention formula and their invariants.

use approx::assert_relative_eq;
use attnmem::experiments::{linspace, logspace};
use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::selfconsistent::{derivatives, solve, NoiseSystemParams, SolverOptions};
use attnmem::theory::{
    attention_error, attention_q, delta9, delta9_prime, lambda9, mp_stieltjes, ridge_error, AlignmentMode,
    ErrorPath, SignalAlignment, CANONICAL_PATH,
};
use proptest::prelude::*;

fn tanh_params(c: f64, gamma: f64) -> NoiseSystemParams {
    let mo = moments(&Nonlinearity::tanh(), DEFAULT_NODES).unwrap();
    NoiseSystemParams::from_moments(c, gamma, &mo).unwrap()
}

fn e_bar(params: &NoiseSystemParams, align: &SignalAlignment) -> f64 {
    attention_error(params, align, &SolverOptions::default()).unwrap().e_bar
}

#[test]
fn ridge_increases_with_gamma() {
    for c in [0.25, 1.0, 4.0] {
        for snr in [0.0, 1.0, 10.0] {
            let e: Vec<f64> = logspace(1e-2, 1e3, 30).into_iter().map(|g| ridge_error(c, g, snr).unwrap()).collect();
            assert!(e.windows(2).all(|w| w[1] > w[0]), "c={c}, snr={snr}");
        }
    }
}

#[test]
fn ridge_decreases_with_ratio() {
    for (gamma, snr) in [(0.1, 0.0), (1.0, 1.0), (10.0, 10.0)] {
        let e: Vec<f64> = linspace(1.0 / 3.0, 3.0, 30).into_iter().map(|c| ridge_error(c, gamma, snr).unwrap()).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]), "gamma={gamma}, snr={snr}");
    }
}

#[test]
fn ridge_decreases_with_snr() {
    for (c, gamma) in [(0.25, 0.01), (1.0, 1.0), (4.0, 10.0)] {
        let e: Vec<f64> = logspace(0.01, 100.0, 30).into_iter().map(|s| ridge_error(c, gamma, s).unwrap()).collect();
        assert!(e.windows(2).all(|w| w[1] < w[0]), "c={c}, gamma={gamma}");
    }
}

#[test]
fn ridgeless_underparameterized_limit() {
    for snr in [0.0, 0.1, 1.0, 10.0] {
        let c = 0.25;
        assert_relative_eq!(ridge_error(c, 1e-9, snr).unwrap(), (1.0 - c) / (1.0 + snr), max_relative = 1e-6);
    }
}

#[test]
fn stieltjes_root_and_derivative() {
    for (c, gamma) in [(0.25, 1e-3), (1.0, 1.0), (4.0, 50.0)] {
        let (m, mp) = mp_stieltjes(c, gamma).unwrap();
        let quadratic = c * gamma * m * m + (1.0 - c + gamma) * m - 1.0;
        assert!(quadratic.abs() < 1e-12 * m.max(1.0));
        let h = 1e-6 * gamma;
        let fd = (mp_stieltjes(c, gamma + h).unwrap().0 - mp_stieltjes(c, gamma - h).unwrap().0) / (2.0 * h);
        assert_relative_eq!(mp, fd, max_relative = 1e-6);
        assert!(mp < 0.0 && m > 0.0);
    }
}

#[test]
fn strong_regularization_saturates_at_one() {
    for c in [0.25, 1.0, 4.0] {
        assert!((ridge_error(c, 1e6, 1.0).unwrap() - 1.0).abs() < 1e-3);
        for mode in AlignmentMode::ALL {
            let e = e_bar(&tanh_params(c, 1e6), &mode.alignment(if mode == AlignmentMode::Null { 0.0 } else { 1.0 }).unwrap());
            assert!((e - 1.0).abs() < 1e-3, "c={c}, {mode}: {e}");
        }
    }
}

#[test]
fn prediction_is_minus_gamma_squared_times_derivative_of_q() {
    let opts = SolverOptions::default();
    for (c, gamma, mode) in [(4.0, 1.0, AlignmentMode::Null), (0.25, 0.1, AlignmentMode::Aligned), (1.0, 2.0, AlignmentMode::Orthogonal)] {
        let snr = if mode == AlignmentMode::Null { 0.0 } else { 1.5 };
        let align = mode.alignment(snr).unwrap();
        let params = tanh_params(c, gamma);
        let h = 1e-4 * gamma;
        let q_hi = attention_q(&params.with_gamma(gamma + h), &align, &opts).unwrap();
        let q_lo = attention_q(&params.with_gamma(gamma - h), &align, &opts).unwrap();
        let fd = -gamma * gamma * (q_hi - q_lo) / (2.0 * h);
        assert_relative_eq!(e_bar(&params, &align), fd, max_relative = 1e-6);
    }
}

#[test]
fn delta_prime_matches_finite_differences() {
    let opts = SolverOptions::default();
    let align = AlignmentMode::Aligned.alignment(2.0).unwrap();
    let (c, gamma) = (0.5, 0.3);
    let params = tanh_params(c, gamma);
    let state = solve(&params, &opts).unwrap();
    let deriv = derivatives(&state, &params, &opts).unwrap();
    let h = 1e-5 * gamma;
    let hi = delta9(&solve(&params.with_gamma(gamma + h), &opts).unwrap(), &align, c, gamma + h);
    let lo = delta9(&solve(&params.with_gamma(gamma - h), &opts).unwrap(), &align, c, gamma - h);
    let fd = (hi - lo) / (2.0 * h);
    let analytic = delta9_prime(&state, &deriv, &align, c, gamma);
    assert!((analytic - fd).amax() < 1e-6 * fd.amax(), "{}", (analytic - fd).amax());
}

#[test]
fn lambda_is_symmetric_and_vanishes_without_linear_part() {
    let align = AlignmentMode::Orthogonal.alignment(3.0).unwrap();
    let l = lambda9(&align, 2.0, 0.6);
    assert_eq!(l, l.transpose());
    let l0 = lambda9(&align, 2.0, 0.0);
    // Only the Σ_X block survives when a1 = 0.
    let mut rest = l0;
    rest.fixed_view_mut::<3, 3>(3, 3).fill(0.0);
    assert_eq!(rest.amax(), 0.0);
}

#[test]
fn zero_snr_aligned_equals_null() {
    let params = tanh_params(1.0, 0.5);
    let null = e_bar(&params, &SignalAlignment::null());
    let aligned = e_bar(&params, &AlignmentMode::Aligned.alignment(0.0).unwrap());
    let signal_only = e_bar(&params, &AlignmentMode::SignalOnly.alignment(0.0).unwrap());
    assert_relative_eq!(null, aligned, max_relative = 1e-12);
    assert_relative_eq!(null, signal_only, max_relative = 1e-12);
}

#[test]
fn canonical_path_is_reported() {
    let p = attention_error(&tanh_params(4.0, 1.0), &SignalAlignment::null(), &SolverOptions::default()).unwrap();
    assert_eq!(p.path, CANONICAL_PATH);
    let expected = match CANONICAL_PATH {
        ErrorPath::ShiftC => p.e_shift_c,
        ErrorPath::ShiftOne => p.e_shift_one,
    };
    assert_eq!(p.e_bar, expected);
}

#[test]
fn alignment_rejects_inconsistent_scalars() {
    assert!(SignalAlignment::new(1.0, 2.0, 0.0, 1.0, 1.0, 0.0).is_err());
    assert!(SignalAlignment::new(-1.0, 0.0, 0.0, 1.0, 1.0, 0.0).is_err());
    assert!("sideways".parse::<AlignmentMode>().is_err());
    for mode in AlignmentMode::ALL {
        assert_eq!(mode.name().parse::<AlignmentMode>().unwrap(), mode);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn sign_flip_leaves_prediction_unchanged(
        log_c in -0.6f64..0.6,
        log_g in -1.0f64..1.5,
        snr in 0.1f64..10.0,
        mode_idx in 1usize..5,
    ) {
        let (c, gamma) = (10f64.powf(log_c), 10f64.powf(log_g));
        let align = AlignmentMode::ALL[mode_idx].alignment(snr).unwrap();
        let plus = tanh_params(c, gamma);
        let minus = NoiseSystemParams::new(c, gamma, -plus.a1, plus.nu).unwrap();
        let (a, b) = (e_bar(&plus, &align), e_bar(&minus, &align));
        prop_assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    #[test]
    fn prediction_lies_in_the_unit_interval(
        log_c in -0.6f64..0.6,
        log_g in -1.5f64..2.5,
        snr in 0.0f64..10.0,
        mode_idx in 1usize..5,
    ) {
        let align = AlignmentMode::ALL[mode_idx].alignment(snr).unwrap();
        let e = e_bar(&tanh_params(10f64.powf(log_c), 10f64.powf(log_g)), &align);
        prop_assert!((0.0..=1.0 + 1e-6).contains(&e), "{e}");
    }
}
