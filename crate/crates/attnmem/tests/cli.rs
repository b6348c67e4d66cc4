//! End-to-end runs of the command-line tool and its exit codes.

use std::process::Command;

fn attnmem(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_attnmem")).args(args).output().expect("binary runs");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const SMALL: [&str; 8] = ["--set", "grid=0.1,1", "--set", "n=128", "--set", "c=2", "--set", "snr=0"];

#[test]
fn theory_writes_csv_to_stdout() {
    let (code, stdout, _) = attnmem(&[&["theory"][..], &SMALL[..]].concat());
    assert_eq!(code, 0);
    let rows = attnmem::experiments::parse_csv(&stdout).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.e_theory.is_some() && r.e_emp_mean.is_none()));
}

#[test]
fn empirical_respects_seed_and_trials() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.csv");
    let args = [&["empirical", "--trials", "2", "--seed", "5", "--out", out.to_str().unwrap()][..], &SMALL[..]].concat();
    assert_eq!(attnmem(&args).0, 0);
    let first = std::fs::read_to_string(&out).unwrap();
    assert_eq!(attnmem(&args).0, 0);
    assert_eq!(std::fs::read_to_string(&out).unwrap(), first);
    let rows = attnmem::experiments::parse_csv(&first).unwrap();
    assert!(rows.iter().all(|r| r.trials == Some(2) && r.master_seed == Some(5)));
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.cfg");
    std::fs::write(&cfg, "# ridge baseline\nmode = theory-ridge\naxis = snr\ngrid = 0.5, 1, 2\nn = 100\nc = 0.5\ngamma = 0.1\nalignment = signal-only\n").unwrap();
    let (code, stdout, _) = attnmem(&["sweep", "--config", cfg.to_str().unwrap(), "--set", "gamma=1", "--workers", "2"]);
    assert_eq!(code, 0);
    let rows = attnmem::experiments::parse_csv(&stdout).unwrap();
    assert!(rows.iter().all(|r| r.gamma == 1.0 && r.e_theory.is_none() && r.e_ridge_theory.is_some()));
}

#[test]
fn config_errors_exit_with_one() {
    assert_eq!(attnmem(&["theory", "--set", "colour=blue"]).0, 1);
    assert_eq!(attnmem(&["theory", "--set", "novalue"]).0, 1);
    assert_eq!(attnmem(&["figure", "fig9"]).0, 1);
    assert_eq!(attnmem(&["theory", "--config", "/nonexistent/cfg"]).0, 1);
    assert_eq!(attnmem(&["frobnicate"]).0, 1);
    assert_eq!(attnmem(&["theory", "--workers", "0"]).0, 1);
}

#[test]
fn numerical_failures_exit_with_two() {
    let (code, stdout, stderr) = attnmem(&["theory", "--set", "grid=1e-5", "--set", "n=1024", "--set", "c=0.125"]);
    assert_eq!(code, 2);
    assert!(stderr.contains("failure"));
    assert_eq!(attnmem::experiments::parse_csv(&stdout).unwrap()[0].e_theory, None);
}

#[test]
fn figure_writes_one_file_per_curve() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, _) = attnmem(&["figure", "fig4", "--out", dir.path().to_str().unwrap(), "--set", "grid=0.5,5"]);
    assert_eq!(code, 0);
    for label in ["fig4-c1-4", "fig4-c1", "fig4-c4"] {
        let rows = attnmem::experiments::parse_csv(&std::fs::read_to_string(dir.path().join(format!("{label}.csv"))).unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
    }
}

#[test]
fn diagnostics_emit_per_trial_rows() {
    let (code, stdout, _) =
        attnmem(&["diag", "traces", "--trials", "2", "--set", "n=64", "--set", "p=128", "--set", "gamma=1"]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 1 + 2 * 8);
    let (code, stdout, _) = attnmem(&[
        "diag", "linearization", "--trials", "2", "--set", "n=64", "--set", "p=64", "--set", "alignment=aligned-unit", "--set", "snr=1",
    ]);
    assert_eq!(code, 0);
    assert_eq!(stdout.lines().count(), 3);
    assert!(stdout.starts_with("trial,seed,n,p,residual"));
}
