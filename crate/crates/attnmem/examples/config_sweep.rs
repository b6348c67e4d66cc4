//! Config-driven sweep written to CSV and read back.
//!
//! ```text
//! cargo run --release --example config_sweep -- results/sweep.csv
//! ```
//! The config text uses the same `key=value` lines as the command-line tool.

use std::path::PathBuf;

use attnmem::experiments::{parse_csv, run_sweep_to, SweepConfig};

const CONFIG: &str = "\
label = snr-sweep
mode = empirical-attention
f = tanh
axis = snr
grid = logspace(0.1, 10, 5)
n = 256
c = 2
gamma = 1
alignment = aligned-unit
trials = 3
seed = 1
";

fn main() -> attnmem::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("snr-sweep.csv"));
    let cfg = SweepConfig::from_text(CONFIG)?;
    let outcome = run_sweep_to(&cfg, &path)?;
    println!("wrote {} rows to {}", outcome.rows.len(), path.display());
    let rows = parse_csv(&std::fs::read_to_string(&path).map_err(|e| attnmem::Error::InvalidArgument(e.to_string()))?)?;
    assert_eq!(rows, outcome.rows);
    for r in &rows {
        println!(
            "snr {:>8.4}  theory {:.6}  empirical {:.6}  ridge {:.6}",
            r.snr,
            r.e_theory.unwrap_or(f64::NAN),
            r.e_emp_mean.unwrap_or(f64::NAN),
            r.e_ridge_theory.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
