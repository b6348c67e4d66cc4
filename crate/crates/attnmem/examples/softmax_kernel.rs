//! Softmax attention against entrywise attention on the same datasets.
//!
//! ```text
//! cargo run --release --example softmax_kernel
//! ```
//! Column-normalized `min(5, exp(t))` scores have no fixed-point theory; this
//! compares their Monte Carlo error with the entrywise clamped exponential.

use attnmem::nonlinearity::Nonlinearity;
use attnmem::simulate::{monte_carlo, ExperimentCell, KernelModel, DEFAULT_SOFTMAX_CAP};
use attnmem::theory::AlignmentMode;

fn main() -> attnmem::Result<()> {
    let base = ExperimentCell {
        n: 512,
        p: 1024,
        gamma: 0.1,
        snr: 2.0,
        mode: AlignmentMode::AlignedUnit,
        model: KernelModel::Softmax { cap: DEFAULT_SOFTMAX_CAP },
    };
    let entrywise = ExperimentCell {
        model: KernelModel::attention(&Nonlinearity::clamped_exp(DEFAULT_SOFTMAX_CAP)?)?,
        ..base.clone()
    };
    let ridge = ExperimentCell { model: KernelModel::Ridge, ..base.clone() };
    for (label, cell) in [("softmax", &base), ("entrywise", &entrywise), ("ridge", &ridge)] {
        let s = monte_carlo(cell, 4, 5)?;
        println!("{label:<10} E {:.6} +- {:.6}", s.mean_e, s.stderr);
    }
    Ok(())
}
