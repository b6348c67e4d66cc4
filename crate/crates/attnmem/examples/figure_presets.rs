//! Lists the figure presets and evaluates the theory curves of one of them.
//!
//! ```text
//! cargo run --release --example figure_presets -- fig2a
//! ```

use attnmem::experiments::{figure_preset, run_sweep, SweepMode, FIGURE_NAMES};

fn main() -> attnmem::Result<()> {
    let name = std::env::args().nth(1).unwrap_or_else(|| "fig2a".into());
    for fig in FIGURE_NAMES {
        let curves = figure_preset(fig)?;
        let labels: Vec<&str> = curves.iter().map(|c| c.label.as_str()).collect();
        println!("{fig:<6} {} curve(s): {}", curves.len(), labels.join(", "));
    }
    for preset in figure_preset(&name)? {
        let cfg = preset.with_overrides(&[("mode", preset.mode.theory_only().name())])?;
        let outcome = run_sweep(&cfg)?;
        println!("{} ({}):", cfg.label, SweepMode::name(&cfg.mode));
        for r in &outcome.rows {
            println!("  x {:>12.6}  E {:.6}", r.axis_value, r.e_theory.or(r.e_ridge_theory).unwrap_or(f64::NAN));
        }
    }
    Ok(())
}
