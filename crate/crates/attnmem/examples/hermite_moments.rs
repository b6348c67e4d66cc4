//! Gaussian moments of every catalog nonlinearity.
//!
//! Prints `a0, a1, a2, nu` and the change when the quadrature is doubled.
//! The Hermite mixture is shown at `r = 0.5`.
//!
//! ```text
//! cargo run --example hermite_moments
//! ```

use attnmem::nonlinearity::{catalog, moments, CATALOG_NAMES, DEFAULT_NODES};

fn main() -> attnmem::Result<()> {
    println!("{:<16} {:>12} {:>12} {:>12} {:>12} {:>10}", "f", "a0", "a1", "a2", "nu", "drift");
    for name in CATALOG_NAMES {
        let params: &[(&str, f64)] = if name == "hermite-mix" { &[("r", 0.5)] } else { &[] };
        let f = catalog(name, params)?;
        let m = moments(&f, DEFAULT_NODES)?;
        let fine = moments(&f, 2 * DEFAULT_NODES)?;
        let drift = [m.a0 - fine.a0, m.a1 - fine.a1, m.a2 - fine.a2, m.nu - fine.nu]
            .into_iter()
            .fold(0.0f64, |acc, d| acc.max(d.abs()));
        println!("{:<16} {:>12.8} {:>12.8} {:>12.2e} {:>12.8} {:>10.1e}", name, m.a0, m.a1, m.a2, m.nu, drift);
    }
    Ok(())
}
