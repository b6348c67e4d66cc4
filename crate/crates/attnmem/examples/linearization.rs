//! Spectral distance between the attention kernel and its linearization.
//!
//! ```text
//! cargo run --release --example linearization
//! ```
//! The residual shrinks like `n^{-1/2}`; doubling `n = p` twice should roughly halve it.

use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::simulate::{linearization_parts, ExperimentCell, KernelModel};
use attnmem::theory::AlignmentMode;

fn main() -> attnmem::Result<()> {
    let f = Nonlinearity::tanh();
    let fc = f.centered(&moments(&f, DEFAULT_NODES)?);
    for n in [256, 512, 1024] {
        let cell = ExperimentCell {
            n,
            p: n,
            gamma: 1.0,
            snr: 1.0,
            mode: AlignmentMode::AlignedUnit,
            model: KernelModel::Attention(fc.clone()),
        };
        let (ds, w) = cell.sample(11)?;
        let r = linearization_parts(&ds, &w, &fc)?;
        println!(
            "n = p = {n:>5}  residual {:.5}  |K_N| {:.4}  |U_K| {:.4}  |V_Q| {:.4}  |Sigma_K| {:.4}",
            r.residual, r.kn_norm, r.uk_norm, r.vq_norm, r.sigmak_norm
        );
    }
    Ok(())
}
