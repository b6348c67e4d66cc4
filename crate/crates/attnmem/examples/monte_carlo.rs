//! Monte Carlo estimate of the memorization error next to the prediction.
//!
//! ```text
//! cargo run --release --example monte_carlo -- 10
//! ```
//! Argument: number of trials (default 4). The cell is `n = 512`, `p = 2048`,
//! tanh attention with aligned unit weights, `snr = 1`, `γ = 1`.

use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::selfconsistent::{NoiseSystemParams, SolverOptions};
use attnmem::simulate::{monte_carlo, ExperimentCell, KernelModel};
use attnmem::theory::{attention_error, AlignmentMode};

fn main() -> attnmem::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let f = Nonlinearity::tanh();
    let cell = ExperimentCell {
        n: 512,
        p: 2048,
        gamma: 1.0,
        snr: 1.0,
        mode: AlignmentMode::AlignedUnit,
        model: KernelModel::attention(&f)?,
    };
    let mo = moments(&f, DEFAULT_NODES)?;
    let params = NoiseSystemParams::from_moments(cell.p as f64 / cell.n as f64, cell.gamma, &mo)?;
    let theory = attention_error(&params, &cell.mode.alignment(cell.snr)?, &SolverOptions::default())?;

    let summary = monte_carlo(&cell, trials, 7)?;
    for (seed, e) in &summary.per_trial {
        println!("seed {seed:>20}  E {e:.6}");
    }
    println!("mean {:.6} +- {:.6} over {} trials", summary.mean_e, summary.stderr, summary.trials);
    println!("prediction {:.6}", theory.e_bar);
    Ok(())
}
