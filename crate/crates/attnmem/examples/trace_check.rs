//! Resolvent traces of one noise-only draw against the fixed-point predictions.
//!
//! ```text
//! cargo run --release --example trace_check -- 1024 2048
//! ```
//! Arguments: `n` and `p` (defaults 512 and 1024), tanh, `γ = 1`.

use attnmem::nonlinearity::Nonlinearity;
use attnmem::simulate::{trace_diagnostics, TraceDiagnostics};

fn main() -> attnmem::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(512);
    let p = args.get(1).copied().unwrap_or(1024);
    let d = trace_diagnostics(n, p, &Nonlinearity::tanh(), 1.0, 3)?;
    let rel = d.relative_errors();
    println!("{:<8} {:>14} {:>14} {:>10}", "trace", "empirical", "predicted", "rel err");
    for (i, name) in TraceDiagnostics::NAMES.iter().enumerate() {
        println!("{name:<8} {:>14.8} {:>14.8} {:>10.2e}", d.empirical[i], d.predicted[i], rel[i]);
    }
    println!("trace identity gap {:.2e}", d.identity_gap);
    Ok(())
}
