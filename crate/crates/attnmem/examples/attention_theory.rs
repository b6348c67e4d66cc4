//! Predicted memorization error of nonlinear attention across alignment modes.
//!
//! ```text
//! cargo run --release --example attention_theory
//! ```
//! Prints `Ē` over a log grid of `γ` at `c = 1/4`, `snr = 2`, with the ridge
//! baseline alongside.

use attnmem::experiments::logspace;
use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::selfconsistent::{NoiseSystemParams, SolverOptions};
use attnmem::theory::{attention_error, ridge_error, AlignmentMode};

fn main() -> attnmem::Result<()> {
    let (c, snr) = (0.25, 2.0);
    let mo = moments(&Nonlinearity::tanh(), DEFAULT_NODES)?;
    let opts = SolverOptions::default();
    let modes = [AlignmentMode::SignalOnly, AlignmentMode::Aligned, AlignmentMode::AlignedUnit, AlignmentMode::Orthogonal];
    print!("{:>10} {:>10}", "gamma", "ridge");
    for mode in modes {
        print!(" {:>13}", mode.name());
    }
    println!();
    for gamma in logspace(1e-2, 1e2, 9) {
        let params = NoiseSystemParams::from_moments(c, gamma, &mo)?;
        print!("{gamma:>10.4} {:>10.6}", ridge_error(c, gamma, snr)?);
        for mode in modes {
            let e = attention_error(&params, &mode.alignment(snr)?, &opts)?;
            print!(" {:>13.6}", e.e_bar);
        }
        println!();
    }
    Ok(())
}
