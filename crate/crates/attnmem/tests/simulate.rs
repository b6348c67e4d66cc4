//! Monte Carlo engine: exact invariances, solver identities and small-scale agreement.

use approx::assert_relative_eq;
use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::simulate::{
    alignment_of, attention_kernel, attention_kernel_with, direct_probe_error, empirical_error, linearization_parts,
    mix64, monte_carlo, ridge_empirical, sample_dataset, signal_vectors, softmax_kernel, spectral_norm,
    trace_diagnostics, AttentionWeights, CenteringPlacement, ExperimentCell, KernelModel, MonteCarloSummary,
    RESOLVENT_TOLERANCE,
};
use attnmem::theory::{ridge_error, AlignmentMode};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn centered_tanh() -> Nonlinearity {
    let f = Nonlinearity::tanh();
    f.centered(&moments(&f, DEFAULT_NODES).unwrap())
}

fn sample(n: usize, p: usize, mode: AlignmentMode, snr: f64, seed: u64) -> (attnmem::simulate::Dataset, AttentionWeights) {
    let cell = ExperimentCell { n, p, gamma: 1.0, snr, mode, model: KernelModel::Ridge };
    cell.sample(seed).unwrap()
}

#[test]
fn negated_map_gives_bit_identical_error() {
    let (ds, w) = sample(96, 160, AlignmentMode::Aligned, 2.0, 1);
    let f = centered_tanh();
    for gamma in [1e-3, 1.0, 100.0] {
        let plus = empirical_error(&ds, &attention_kernel(&ds, &w, &f).unwrap(), gamma).unwrap();
        let minus = empirical_error(&ds, &attention_kernel(&ds, &w, &f.negated()).unwrap(), gamma).unwrap();
        assert_eq!(plus.e.to_bits(), minus.e.to_bits());
    }
}

#[test]
fn resolvent_and_direct_probe_agree() {
    let f = centered_tanh();
    for (n, p, gamma) in [(80, 40, 0.1), (60, 120, 1.0), (100, 100, 10.0)] {
        let (ds, w) = sample(n, p, AlignmentMode::AlignedUnit, 1.0, 2);
        let k = attention_kernel(&ds, &w, &f).unwrap();
        let via_resolvent = empirical_error(&ds, &k, gamma).unwrap();
        let direct = direct_probe_error(&ds, &k, gamma).unwrap();
        assert!((via_resolvent.e - direct).abs() < 1e-10, "{} vs {direct}", via_resolvent.e);
        assert!(via_resolvent.resolvent_residual < RESOLVENT_TOLERANCE);
        assert!(via_resolvent.warning.is_none());
    }
}

#[test]
fn extreme_penalties_order_the_error() {
    let f = centered_tanh();
    for seed in 0..3 {
        let (ds, w) = sample(64, 128, AlignmentMode::SignalOnly, 1.0, seed);
        let k = attention_kernel(&ds, &w, &f).unwrap();
        let small = empirical_error(&ds, &k, 1e-8).unwrap().e;
        let large = empirical_error(&ds, &k, 1e8).unwrap().e;
        assert!(small < large);
        assert!((large - 1.0).abs() < 1e-6);
    }
}

#[test]
fn softmax_columns_sum_to_one() {
    let (ds, w) = sample(50, 80, AlignmentMode::AlignedUnit, 3.0, 4);
    let k = softmax_kernel(&ds, &w, 5.0).unwrap();
    for col in k.k.column_iter() {
        assert!((col.sum() - 1.0).abs() < 1e-12);
        assert!(col.iter().all(|&v| v > 0.0));
    }
    assert!(softmax_kernel(&ds, &w, 0.0).is_err());
}

#[test]
fn constructed_vectors_have_the_mode_inner_products() {
    for mode in AlignmentMode::ALL {
        let snr = if mode == AlignmentMode::Null { 0.0 } else { 2.5 };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mu, w) = signal_vectors(mode, snr, 300, &mut rng).unwrap();
        let got = alignment_of(&mu, &w).unwrap();
        let want = mode.alignment(snr).unwrap();
        for (a, b) in [
            (got.mu2, want.mu2),
            (got.muwk, want.muwk),
            (got.muwq, want.muwq),
            (got.wk2, want.wk2),
            (got.wq2, want.wq2),
            (got.wkwq, want.wkwq),
        ] {
            assert!((a - b).abs() < 1e-10, "{mode}: {a} vs {b}");
        }
    }
}

#[test]
fn dataset_is_signal_plus_noise() {
    let mu = DVector::from_fn(40, |i, _| (i as f64 * 0.1).sin());
    let ds = sample_dataset(30, 40, &mu, 5).unwrap();
    assert!(ds.y.iter().all(|&v| v == 1.0 || v == -1.0));
    let rebuilt = ds.noise() + &mu * ds.y.transpose();
    assert!((rebuilt - &ds.x).amax() < 1e-14);
    assert_eq!(sample_dataset(30, 40, &mu, 5).unwrap(), ds);
    assert_ne!(sample_dataset(30, 40, &mu, 6).unwrap().x, ds.x);
    assert!(sample_dataset(30, 41, &mu, 5).is_err());
}

#[test]
fn spectral_norm_matches_singular_values() {
    let a = DMatrix::from_fn(40, 25, |i, j| ((i * 31 + j * 17) % 11) as f64 - 5.0 + if i == j { 3.0 } else { 0.0 });
    let exact = a.clone().singular_values().max();
    assert_relative_eq!(spectral_norm(&a), exact, max_relative = 1e-5);
}

#[test]
fn centering_on_the_diagonal_barely_matters() {
    let f = centered_tanh();
    let (ds, w) = sample(256, 512, AlignmentMode::AlignedUnit, 1.0, 3);
    let all = empirical_error(&ds, &attention_kernel(&ds, &w, &f).unwrap(), 1.0).unwrap().e;
    let off = attention_kernel_with(&ds, &w, &f, CenteringPlacement::OffDiagonalOnly).unwrap();
    let off = empirical_error(&ds, &off, 1.0).unwrap().e;
    assert!((all - off).abs() < 0.01, "{all} vs {off}");
}

#[test]
fn null_linearization_residual_is_the_diagonal() {
    let f = centered_tanh();
    let p = 256;
    let (ds, w) = sample(p, p, AlignmentMode::Null, 0.0, 8);
    let r = linearization_parts(&ds, &w, &f).unwrap();
    // K_N drops only the diagonal, where f saturates at 1 for scores of order √p.
    assert!((r.residual - 1.0 / (p as f64).sqrt()).abs() < 1e-6, "{}", r.residual);
}

#[test]
fn ridge_monte_carlo_matches_closed_form() {
    for (n, p, gamma, snr) in [(512, 1024, 1.0, 1.0), (1024, 256, 0.1, 2.0)] {
        let cell = ExperimentCell { n, p, gamma, snr, mode: AlignmentMode::SignalOnly, model: KernelModel::Ridge };
        let s = monte_carlo(&cell, 8, 17).unwrap();
        let theory = ridge_error(p as f64 / n as f64, gamma, snr).unwrap();
        assert!((s.mean_e - theory).abs() <= (3.0 * s.stderr).max(0.03 * theory), "{} vs {theory}", s.mean_e);
    }
}

#[test]
fn small_traces_track_predictions() {
    let d = trace_diagnostics(256, 512, &Nonlinearity::tanh(), 1.0, 21).unwrap();
    assert!(d.identity_gap < 1e-10);
    for (name, rel) in attnmem::simulate::TraceDiagnostics::NAMES.iter().zip(d.relative_errors()) {
        assert!(rel < 0.1, "{name}: {rel}");
    }
}

#[test]
fn monte_carlo_is_reproducible_and_schedule_free() {
    let cell = ExperimentCell {
        n: 64,
        p: 96,
        gamma: 0.5,
        snr: 1.0,
        mode: AlignmentMode::Aligned,
        model: KernelModel::attention(&Nonlinearity::tanh()).unwrap(),
    };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| monte_carlo(&cell, 6, 3)).unwrap();
    let many = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap().install(|| monte_carlo(&cell, 6, 3)).unwrap();
    assert_eq!(one, many);
    assert_eq!(one.per_trial.iter().map(|t| t.0).collect::<Vec<_>>(), (0..6).map(|t| mix64(3, t)).collect::<Vec<_>>());
    assert_relative_eq!(one.stderr, one.std_e / 6f64.sqrt(), max_relative = 1e-15);
    assert!(monte_carlo(&cell, 0, 3).is_err());
}

#[test]
fn summary_of_one_trial_has_zero_spread() {
    let s = MonteCarloSummary::from_values(vec![(1, 0.4)], Vec::new()).unwrap();
    assert_eq!((s.mean_e, s.std_e, s.stderr, s.trials), (0.4, 0.0, 0.0, 1));
    assert!(MonteCarloSummary::from_values(Vec::new(), Vec::new()).is_err());
}

#[test]
fn ridge_probe_is_the_linear_kernel_special_case() {
    let (ds, _) = sample(40, 70, AlignmentMode::SignalOnly, 1.0, 12);
    let identity = attnmem::simulate::KernelMatrix {
        k: DMatrix::identity(40, 40),
        kind: attnmem::simulate::KernelKind::Entrywise,
        f_name: "identity".into(),
        center_shift: 0.0,
    };
    let a = ridge_empirical(&ds, 0.7).unwrap().e;
    let b = empirical_error(&ds, &identity, 0.7).unwrap().e;
    assert_eq!(a.to_bits(), b.to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn token_permutation_leaves_error_unchanged(seed in 0u64..1000, log_g in -2.0f64..2.0) {
        let f = centered_tanh();
        let (ds, w) = sample(48, 72, AlignmentMode::AlignedUnit, 1.5, seed);
        let mut perm: Vec<usize> = (0..48).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let shuffled = ds.permuted(&perm).unwrap();
        let gamma = 10f64.powf(log_g);
        let a = empirical_error(&ds, &attention_kernel(&ds, &w, &f).unwrap(), gamma).unwrap().e;
        let b = empirical_error(&shuffled, &attention_kernel(&shuffled, &w, &f).unwrap(), gamma).unwrap().e;
        prop_assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }

    #[test]
    fn error_lies_in_the_unit_interval(seed in 0u64..1000, log_g in -3.0f64..3.0, mode_idx in 0usize..5) {
        let mode = AlignmentMode::ALL[mode_idx];
        let snr = if mode == AlignmentMode::Null { 0.0 } else { 1.0 };
        let (ds, w) = sample(40, 60, mode, snr, seed);
        let e = empirical_error(&ds, &attention_kernel(&ds, &w, &centered_tanh()).unwrap(), 10f64.powf(log_g)).unwrap().e;
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
