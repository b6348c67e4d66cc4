//! Sweep configs, CSV output, figure presets and determinism of sweeps.

use attnmem::experiments::{
    exit_code_for, figure_preset, format_real, linspace, logspace, parse_csv, parse_grid, quantize, run_sweep,
    run_sweep_to, to_csv, Axis, ResultRow, SweepConfig, SweepMode, FIGURE_NAMES,
};
use attnmem::theory::AlignmentMode;
use attnmem::Error;
use proptest::prelude::*;

fn small_theory() -> SweepConfig {
    SweepConfig::from_text(
        "mode = theory-attention\naxis = gamma\ngrid = logspace(0.1, 10, 4)\nn = 256\nc = 2\nalignment = aligned\nsnr = 1\n",
    )
    .unwrap()
}

#[test]
fn grids_parse() {
    assert_eq!(parse_grid("1, 2, 4").unwrap(), vec![1.0, 2.0, 4.0]);
    assert_eq!(parse_grid("linspace(0, 1, 3)").unwrap(), vec![0.0, 0.5, 1.0]);
    assert_eq!(parse_grid("rlinspace(1, 4, 3)").unwrap(), vec![1.0, 3.0, 4.0]);
    let g = logspace(1e-2, 1e3, 30);
    assert_eq!((g[0], g[29]), (1e-2, 1e3));
    assert_eq!(linspace(1.0, 3.0, 5), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    assert!(parse_grid("logspace(1, 10)").is_err());
    assert!(parse_grid("").is_err());
}

#[test]
fn config_round_trips_through_text() {
    for name in FIGURE_NAMES {
        for cfg in figure_preset(name).unwrap() {
            assert_eq!(SweepConfig::from_text(&cfg.to_text()).unwrap(), cfg, "{}", cfg.label);
        }
    }
    let cfg = small_theory();
    assert_eq!(SweepConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    for text in [
        "colour = blue",
        "n = -3",
        "grid = 1, 3, 2",
        "grid = 1, 1, 2",
        "mode = fast",
        "alignment = null\nsnr = 1",
        "c = 2\np = 100",
        "axis = a1-mix\nf = tanh",
        "f = softmax\nmode = theory-attention",
        "trials = 0\nmode = empirical-ridge",
        "axis = snr\ngrid = 1, 2\ngamma = 0",
    ] {
        let err = SweepConfig::from_text(text).and_then(|c| c.validate().map(|_| c));
        assert!(matches!(err, Err(Error::InvalidArgument(_))), "accepted: {text:?}");
    }
    assert!(matches!(figure_preset("fig9"), Err(Error::InvalidArgument(_))));
}

#[test]
fn overrides_apply_in_order() {
    let cfg = small_theory().with_overrides(&[("gamma", "3"), ("n", "128"), ("c", "0.5")]).unwrap();
    assert_eq!((cfg.gamma, cfg.n, cfg.p), (3.0, 128, 64.0));
    assert_eq!(cfg.axis, Axis::Gamma);
    assert!(small_theory().with_overrides(&[("nonsense", "1")]).is_err());
}

#[test]
fn theory_columns_ignore_seed_and_trials() {
    let base = SweepConfig::from_text(
        "mode = empirical-attention\naxis = snr\ngrid = 0.5, 2\nn = 64\nc = 1.5\ngamma = 1\nalignment = aligned-unit\ntrials = 2\nseed = 1\n",
    )
    .unwrap();
    let other = base.with_overrides(&[("seed", "99"), ("trials", "3")]).unwrap();
    let (a, b) = (run_sweep(&base).unwrap(), run_sweep(&other).unwrap());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.e_theory, y.e_theory);
        assert_eq!(x.e_ridge_theory, y.e_ridge_theory);
        assert_ne!(x.e_emp_mean, y.e_emp_mean);
    }
    assert_eq!(run_sweep(&base).unwrap(), a);
}

#[test]
fn shared_cells_agree_across_sweeps() {
    let a = run_sweep(&small_theory().with_overrides(&[("grid", "0.1, 1, 10")]).unwrap()).unwrap();
    let b = run_sweep(&small_theory().with_overrides(&[("grid", "1, 5")]).unwrap()).unwrap();
    let (x, y) = (a.rows[1].e_theory.unwrap(), b.rows[0].e_theory.unwrap());
    assert!((x - y).abs() <= 1e-12);
}

#[test]
fn theory_only_rows_leave_empirical_fields_empty() {
    let out = run_sweep(&small_theory()).unwrap();
    assert_eq!(out.exit_code(), 0);
    let csv = to_csv(&out.rows);
    let fields: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(fields.len(), 17);
    // e_emp_mean, e_emp_std, e_emp_stderr, trials, master_seed
    assert!(fields[10..15].iter().all(|f| f.is_empty()));
    for row in &out.rows {
        assert!(row.e_emp_mean.is_none() && row.trials.is_none() && row.master_seed.is_none());
        assert!(row.e_theory.is_some() && row.e_ridge_theory.is_some());
    }
}

#[test]
fn sweep_csv_round_trips_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested").join("out.csv");
    let cfg = small_theory().with_overrides(&[("mode", "empirical-ridge"), ("trials", "2"), ("n", "64")]).unwrap();
    let out = run_sweep_to(&cfg, &path).unwrap();
    let back = parse_csv(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(back, out.rows);
}

#[test]
fn solver_failures_yield_exit_code_two() {
    let cfg = SweepConfig::from_text("mode = theory-attention\naxis = gamma\ngrid = 1e-5, 1\nn = 1024\nc = 0.125\n").unwrap();
    let out = run_sweep(&cfg).unwrap();
    assert_eq!(out.exit_code(), 2);
    assert!(out.rows[0].e_theory.is_none());
    assert!(out.rows[0].e_ridge_theory.is_some());
    assert!(out.rows[1].e_theory.is_some());
    assert_eq!(exit_code_for(&Error::InvalidArgument("x".into())), 1);
    assert_eq!(exit_code_for(&Error::NonConvergence { iterations: 1, residual: 1.0 }), 2);
}

#[test]
fn figure_presets_cover_every_figure() {
    for name in FIGURE_NAMES {
        let curves = figure_preset(name).unwrap();
        assert!(!curves.is_empty());
        for cfg in &curves {
            assert!(cfg.label.starts_with(name));
            cfg.validate().unwrap();
        }
    }
    let fig3a = &figure_preset("fig3a").unwrap()[0];
    assert_eq!((fig3a.grid.len(), fig3a.alignment), (20, AlignmentMode::Aligned));
    assert_eq!(figure_preset("fig2c").unwrap()[0].mode, SweepMode::EmpiricalAttention);
}

#[test]
fn theory_stays_in_the_unit_interval_on_every_preset() {
    for name in FIGURE_NAMES {
        for preset in figure_preset(name).unwrap() {
            let cfg = preset.with_overrides(&[("mode", preset.mode.theory_only().name())]).unwrap();
            let out = run_sweep(&cfg).unwrap();
            for row in &out.rows {
                for e in [row.e_theory, row.e_ridge_theory].into_iter().flatten() {
                    assert!((0.0..=1.0 + 1e-6).contains(&e), "{} at {}: {e}", cfg.label, row.axis_value);
                }
            }
        }
    }
}

fn real() -> impl Strategy<Value = f64> {
    prop_oneof![(-1e6f64..1e6), (1e-9f64..1e-3), (1e9f64..1e15), Just(0.0)].prop_map(quantize)
}

fn opt_real() -> impl Strategy<Value = Option<f64>> {
    proptest::option::of(real())
}

prop_compose! {
    fn row()(
        head in proptest::array::uniform6(real()),
        n in 1usize..100_000,
        mid in proptest::array::uniform8(opt_real()),
        counts in (proptest::option::of(0usize..1000), proptest::option::of(any::<u64>()), proptest::option::of(0usize..100_000)),
    ) -> ResultRow {
        ResultRow {
            axis_value: head[0],
            n,
            p: head[1],
            c: head[2],
            gamma: head[3],
            snr: head[4],
            a1: mid[0],
            nu: mid[1],
            e_theory: mid[2],
            e_ridge_theory: mid[3],
            e_emp_mean: mid[4],
            e_emp_std: mid[5],
            e_emp_stderr: mid[6],
            trials: counts.0,
            master_seed: counts.1,
            solver_iterations: counts.2,
            residual: mid[7].map(|v| quantize(v.abs() + head[5].abs())),
        }
    }
}

proptest! {
    #[test]
    fn csv_round_trips_exactly(rows in proptest::collection::vec(row(), 0..6)) {
        prop_assert_eq!(parse_csv(&to_csv(&rows)).unwrap(), rows);
    }

    #[test]
    fn formatted_reals_keep_twelve_digits(x in -1e12f64..1e12) {
        let back: f64 = format_real(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 5e-12 * x.abs());
        prop_assert_eq!(quantize(back), back);
    }
}
