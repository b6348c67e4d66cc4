//! Solves the noise-only fixed point and inspects its derivatives.
//!
//! ```text
//! cargo run --example fixed_point -- 0.25 0.01
//! ```
//! Arguments: `c` and `γ` (defaults 4 and 1), nonlinearity tanh.

use attnmem::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use attnmem::selfconsistent::{analytic_derivatives, fd_derivatives, relative_gap, solve, NoiseSystemParams, SolverOptions, TailDerivativeForm};

fn main() -> attnmem::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let c = args.first().copied().unwrap_or(4.0);
    let gamma = args.get(1).copied().unwrap_or(1.0);
    let mo = moments(&Nonlinearity::tanh(), DEFAULT_NODES)?;
    let params = NoiseSystemParams::from_moments(c, gamma, &mo)?;
    let opts = SolverOptions::default();

    let state = solve(&params, &opts)?;
    println!("c = {c}, gamma = {gamma}, a1 = {:.6}, nu = {:.6}", params.a1, params.nu);
    println!("iterations {} residual {:.2e}", state.iterations, state.residual);
    println!("m = {:.10}", state.m);
    for (i, d) in state.delta.iter().enumerate() {
        println!("delta{} = {:.10}", i + 1, d);
    }

    let analytic = analytic_derivatives(&state, &params, TailDerivativeForm::Direct)?;
    let fd = fd_derivatives(&params, &opts)?;
    println!("m' analytic {:.8e}, finite difference {:.8e}", analytic.mp, fd.mp);
    println!("largest relative gap over all derivatives {:.2e}", relative_gap(&analytic, &fd));
    Ok(())
}
