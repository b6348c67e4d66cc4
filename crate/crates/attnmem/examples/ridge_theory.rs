//! Closed-form memorization error of the ridge baseline.
//!
//! ```text
//! cargo run --example ridge_theory
//! ```
//! Shows the three monotone trends: up in `γ`, down in `c`, down in `snr`.

use attnmem::experiments::{linspace, logspace};
use attnmem::theory::{mp_stieltjes, ridge_error};

fn main() -> attnmem::Result<()> {
    println!("gamma sweep at c = 4, snr = 1");
    for gamma in logspace(1e-2, 1e3, 6) {
        let (m, _) = mp_stieltjes(4.0, gamma)?;
        println!("  gamma {gamma:>10.4}  E {:.6}  m(-gamma) {m:.6}", ridge_error(4.0, gamma, 1.0)?);
    }
    println!("ratio sweep at gamma = 1, snr = 1");
    for c in linspace(1.0 / 3.0, 3.0, 5) {
        println!("  c {c:>6.3}  E {:.6}", ridge_error(c, 1.0, 1.0)?);
    }
    println!("snr sweep at c = 1/4, gamma = 1e-5");
    for snr in logspace(0.1, 100.0, 4) {
        let limit = (1.0 - 0.25) / (1.0 + snr);
        println!("  snr {snr:>8.3}  E {:.6}  ridgeless limit {limit:.6}", ridge_error(0.25, 1e-5, snr)?);
    }
    Ok(())
}
