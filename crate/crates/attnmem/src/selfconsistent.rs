//! Self-consistent equations for the noise-only attention resolvent.
//!
//! All quantities use the resolvent `Q(γ) = (K Zᵀ Z K / p + (γ/c) I_n)⁻¹` of the
//! noise-only kernel `K`. In this normalization `m(γ)` approximates `(1/n) tr Q(γ)`
//! and the `δ`s approximate the normalized traces listed on
//! [`SelfConsistentState::delta`]. The unit-penalty resolvent
//! `(K Zᵀ Z K / n + γ I_n)⁻¹` is `Q(γ)/c`; see [`SelfConsistentState::unit_penalty_trace`].

use nalgebra::{Matrix5, Matrix6, Vector5, Vector6};

use crate::error::{invalid, Error, Result};
use crate::nonlinearity::HermiteMoments;

mod precise;

/// Inputs of the noise-only system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSystemParams {
    /// Limit of `p/n`.
    pub c: f64,
    /// Ridge penalty `γ` of the memorization problem.
    pub gamma: f64,
    /// First Hermite coefficient of the nonlinearity.
    pub a1: f64,
    /// Centered second moment of the nonlinearity.
    pub nu: f64,
}

impl NoiseSystemParams {
    /// Validates and builds the parameter set.
    pub fn new(c: f64, gamma: f64, a1: f64, nu: f64) -> Result<Self> {
        let p = Self { c, gamma, a1, nu };
        p.validate()?;
        Ok(p)
    }

    /// Takes `a1` and `nu` from computed moments.
    pub fn from_moments(c: f64, gamma: f64, m: &HermiteMoments) -> Result<Self> {
        Self::new(c, gamma, m.a1, m.nu)
    }

    /// Checks `c > 0`, `γ > 0` and `ν ≥ a1²` (with rounding slack).
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid(format!("c must be positive and finite, got {}", self.c)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be positive and finite, got {}", self.gamma)));
        }
        if !(self.a1.is_finite() && self.nu.is_finite()) {
            return Err(invalid("a1 and nu must be finite"));
        }
        if self.nu < self.a1 * self.a1 * (1.0 - 1e-9) - 1e-12 {
            return Err(invalid(format!("nu = {} is below a1² = {}", self.nu, self.a1 * self.a1)));
        }
        Ok(())
    }

    /// The same cell at a different penalty.
    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self { gamma, ..*self }
    }
}

/// Iteration controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop when [`scaled_defect`] of the five core equations drops below this.
    pub tol: f64,
    /// Iteration budget.
    pub max_iter: usize,
    /// Initial relaxation weight of the new iterate, in `(0, 1]`.
    pub damping: f64,
    /// Relative step `h` of the central differences in `γ`.
    pub fd_step_rel: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 10_000, damping: 0.5, fd_step_rel: 1e-5 }
    }
}

impl SolverOptions {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(invalid(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.fd_step_rel > 0.0 && self.fd_step_rel < 0.5) {
            return Err(invalid(format!("fd_step_rel must lie in (0, 0.5), got {}", self.fd_step_rel)));
        }
        Ok(())
    }
}

/// Smallest relaxation weight reached by automatic halving.
const MIN_DAMPING: f64 = 1.0 / 16.0;
/// Consecutive residual increases that trigger a halving.
const STALL_WINDOW: usize = 20;

/// The fixed vectors `v, v1, v2, v4, v7` of the system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseVectors {
    pub v: Vector6<f64>,
    pub v1: Vector6<f64>,
    pub v2: Vector6<f64>,
    pub v4: Vector6<f64>,
    pub v7: Vector6<f64>,
}

/// Builds the fixed vectors for given `c` and `a1`.
pub fn base_vectors(c: f64, a1: f64) -> BaseVectors {
    let r = a1 / c;
    BaseVectors {
        v: Vector6::new(a1 * a1 * (1.0 + c) / (c * c), r, r, 0.0, 0.0, 1.0),
        v1: Vector6::new(0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
        v2: Vector6::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
        v4: Vector6::new(r, 1.0, 1.0, 0.0, 0.0, 0.0),
        v7: Vector6::new(2.0 * r + a1 / (c * c), 1.0 / c + 1.0, 1.0 / c + 1.0, 0.0, 1.0, 0.0),
    }
}

/// The constant symmetric matrix `Λ₀`.
pub fn lambda0(c: f64, a1: f64) -> Matrix6<f64> {
    let r = a1 / c;
    let mut l = Matrix6::zeros();
    l[(0, 0)] = a1 * a1 * (c + 1.0) / (c * c);
    l[(0, 1)] = r;
    l[(0, 2)] = r;
    l[(0, 4)] = a1;
    l[(1, 1)] = 1.0;
    l[(1, 2)] = 1.0;
    l[(2, 2)] = 1.0;
    symmetrize_upper(&mut l);
    l
}

fn symmetrize_upper(a: &mut Matrix6<f64>) {
    for i in 0..6 {
        for j in 0..i {
            a[(i, j)] = a[(j, i)];
        }
    }
}

/// Core unknowns `(m, δ1, δ2, δ3, δ4)` in that order.
pub type Core = [f64; 5];

/// Builds `Δ₀` from `m`, `δ1..δ4` and the shared factor `g = (1 - γ m / c)/c`.
fn delta0_from(m_over_c: f64, d: [f64; 4], g: f64, a1: f64, nu: f64) -> Matrix6<f64> {
    let [d1, d2, d3, d4] = d;
    let mut a = Matrix6::zeros();
    // 2×2 blocks have the pattern [[x, a1 x], [a1 x, ν x]].
    let blocks = [[m_over_c, d1, d2], [d1, d3, g], [d2, g, d4]];
    for (bi, row) in blocks.iter().enumerate() {
        for (bj, &x) in row.iter().enumerate() {
            a[(2 * bi, 2 * bj)] = x;
            a[(2 * bi, 2 * bj + 1)] = a1 * x;
            a[(2 * bi + 1, 2 * bj)] = a1 * x;
            a[(2 * bi + 1, 2 * bj + 1)] = nu * x;
        }
    }
    a
}

/// The symmetric matrix `Δ₀` at the given state.
pub fn delta0_matrix(m: f64, d1: f64, d2: f64, d3: f64, d4: f64, params: &NoiseSystemParams) -> Matrix6<f64> {
    let c = params.c;
    let g = (1.0 - params.gamma * m / c) / c;
    delta0_from(m / c, [d1, d2, d3, d4], g, params.a1, params.nu)
}

/// `T = Δ₀ (I + Λ₀ Δ₀)⁻¹`, symmetrized after a symmetry check.
pub fn t_matrix(delta0: &Matrix6<f64>, lambda0: &Matrix6<f64>) -> Result<Matrix6<f64>> {
    let inv = resolvent_factor(lambda0 * delta0)?;
    let t = delta0 * inv;
    let asym = (t - t.transpose()).amax();
    if asym > 1e-8 * t.amax().max(1.0) {
        return Err(Error::NumericDomain(format!("T failed its symmetry check (asymmetry {asym:e})")));
    }
    Ok((t + t.transpose()) * 0.5)
}

/// Returns `(I + a)⁻¹`, reporting an ill-conditioned system as a breakdown.
fn resolvent_factor(a: Matrix6<f64>) -> Result<Matrix6<f64>> {
    let m = Matrix6::identity() + a;
    let sv = m.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::SolverBreakdown { context: "I + Λ₀Δ₀ is singular".into(), condition: cond });
    }
    m.try_inverse().ok_or(Error::SolverBreakdown { context: "I + Λ₀Δ₀ is singular".into(), condition: cond })
}

/// Converged solution of the noise-only system.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfConsistentState {
    /// Approximates `(1/n) tr Q`.
    pub m: f64,
    /// `δ1..δ7`, approximating `(1/p)` times the traces of
    /// `QK`, `QKŽ`, `KQK`, `ŽKQKŽ`, `QŽ`, `ŽKQŽ`, `ŽKQKŽŽ` with `Ž = ZᵀZ/p`.
    pub delta: [f64; 7],
    pub delta0: Matrix6<f64>,
    pub lambda0: Matrix6<f64>,
    pub t: Matrix6<f64>,
    pub vectors: BaseVectors,
    /// [`scaled_defect`] of the five core equations at the returned state.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl SelfConsistentState {
    /// The five core unknowns.
    pub fn core(&self) -> Core {
        [self.m, self.delta[0], self.delta[1], self.delta[2], self.delta[3]]
    }

    /// Limit of `(1/n) tr (K Zᵀ Z K / n + γ I)⁻¹`, the unit-penalty normalization.
    pub fn unit_penalty_trace(&self, c: f64) -> f64 {
        self.m / c
    }
}

/// Scalar products of `T` that the update formulas need.
struct Products {
    vtv1: f64,
    v2tv: f64,
    v4tv: f64,
    v4tv2: f64,
    v4tv7: f64,
    v7tv: f64,
}

impl Products {
    fn new(t: &Matrix6<f64>, b: &BaseVectors) -> Self {
        let q = |x: &Vector6<f64>, y: &Vector6<f64>| x.dot(&(t * y));
        Self {
            vtv1: q(&b.v, &b.v1),
            v2tv: q(&b.v2, &b.v),
            v4tv: q(&b.v4, &b.v),
            v4tv2: q(&b.v4, &b.v2),
            v4tv7: q(&b.v4, &b.v7),
            v7tv: q(&b.v7, &b.v),
        }
    }
}

/// Evaluates the right-hand sides of the core equations at `x`.
///
/// The map is evaluated in double-double arithmetic so that its rounding
/// floor stays well below the default tolerance.
pub fn fixed_point_map(params: &NoiseSystemParams, x: &Core) -> Result<Core> {
    let fx = precise::map(params, x).ok_or_else(|| Error::SolverBreakdown {
        context: "I + Λ₀Δ₀ is singular".into(),
        condition: f64::INFINITY,
    })?;
    check_finite(&fx, "fixed-point update")?;
    Ok(fx)
}

/// `δ5, δ6, δ7` from a converged `T` and `m`.
fn tail_deltas(params: &NoiseSystemParams, m: f64, t: &Matrix6<f64>, b: &BaseVectors) -> [f64; 3] {
    let (c, a1) = (params.c, params.a1);
    let pr = Products::new(t, b);
    let e4 = pr.v4tv - a1 / c;
    let e7 = pr.v7tv - (a1 / c) * (2.0 + 1.0 / c);
    let cd5 = m * (1.0 - pr.v2tv);
    let cd6 = pr.v4tv2 + m * (pr.v2tv - 1.0) * e4;
    let cd7 = pr.v4tv7 + m * e4 * e7;
    [cd5 / c, cd6 / c, cd7 / c]
}

fn check_finite(x: &Core, what: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericDomain(format!("non-finite {what}: {x:?}")))
    }
}

/// The `T = 0` starting point, exact as `γ → ∞`.
pub fn initial_state(params: &NoiseSystemParams) -> Core {
    let (c, a1) = (params.c, params.a1);
    [1.0 / (params.gamma / c + params.nu / c + a1 * a1 / (c * c)), 0.0, 0.0, 0.0, 0.0]
}

/// Scaled defect `max_i |F(x)_i - x_i| / max(1, |x_i|)` of the core equations.
///
/// Entries of order one are compared absolutely; large entries relatively, so
/// that the tolerance stays above the rounding floor of the map.
pub fn scaled_defect(fx: &Core, x: &Core) -> f64 {
    fx.iter().zip(x).map(|(f, v)| (f - v).abs() / v.abs().max(1.0)).fold(0.0, f64::max)
}

/// Solves the system from [`initial_state`].
///
/// Runs damped fixed-point iteration first. If it fails, the solution is
/// continued down from a larger `γ` where iteration converges, polishing each
/// step with Newton's method.
pub fn solve(params: &NoiseSystemParams, opts: &SolverOptions) -> Result<SelfConsistentState> {
    match solve_from(params, opts, initial_state(params)) {
        Ok(s) => Ok(s),
        Err(first) => {
            log::debug!("damped iteration failed at c={}, gamma={}: {first}; continuing in gamma", params.c, params.gamma);
            solve_by_continuation(params, opts).map_err(|_| first)
        }
    }
}

/// Damped fixed-point iteration from `start`.
pub fn solve_from(params: &NoiseSystemParams, opts: &SolverOptions, start: Core) -> Result<SelfConsistentState> {
    params.validate()?;
    opts.validate()?;
    let mut x = start;
    let mut damping = opts.damping;
    let mut last_residual = f64::INFINITY;
    let mut rising = 0usize;
    let mut residual = f64::INFINITY;
    for iter in 0..opts.max_iter {
        let fx = fixed_point_map(params, &x)?;
        residual = scaled_defect(&fx, &x);
        if residual < opts.tol {
            return finish(params, x, residual, iter);
        }
        if residual > last_residual {
            rising += 1;
            if rising >= STALL_WINDOW && damping > MIN_DAMPING {
                damping = (damping * 0.5).max(MIN_DAMPING);
                rising = 0;
                log::debug!("halving damping to {damping} at iteration {iter}");
            }
        } else {
            rising = 0;
        }
        last_residual = residual;
        for (xi, fi) in x.iter_mut().zip(fx) {
            *xi = (1.0 - damping) * *xi + damping * fi;
        }
    }
    Err(Error::NonConvergence { iterations: opts.max_iter, residual })
}

const NEWTON_MAX_ITER: usize = 100;

/// Newton's method on `F(x) - x` with a finite-difference Jacobian and backtracking.
///
/// Steps are accepted when they reduce the sum of squared scaled defects.
fn newton(params: &NoiseSystemParams, opts: &SolverOptions, start: Core) -> Result<SelfConsistentState> {
    let g = |x: &Core| -> Result<Core> {
        let fx = fixed_point_map(params, x)?;
        Ok([fx[0] - x[0], fx[1] - x[1], fx[2] - x[2], fx[3] - x[3], fx[4] - x[4]])
    };
    let norm = |gx: &Core, x: &Core| gx.iter().zip(x).map(|(d, v)| d.abs() / v.abs().max(1.0)).fold(0.0, f64::max);
    let merit = |gx: &Core, scale: &Core| gx.iter().zip(scale).map(|(d, v)| (d / v.abs().max(1.0)).powi(2)).sum::<f64>();
    let mut x = start;
    let mut gx = g(&x)?;
    for _ in 0..NEWTON_MAX_ITER {
        let current = norm(&gx, &x);
        if current < opts.tol {
            return finish(params, x, current, 0);
        }
        let mut jac = Matrix5::zeros();
        for j in 0..5 {
            let h = 1e-7 * x[j].abs().max(1e-3);
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let (gp, gm) = (g(&xp)?, g(&xm)?);
            for i in 0..5 {
                jac[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let step = jac
            .lu()
            .solve(&Vector5::from_column_slice(&gx))
            .ok_or(Error::SolverBreakdown { context: "Newton Jacobian is singular".into(), condition: f64::INFINITY })?;
        let scale = x;
        let base = merit(&gx, &scale);
        let mut lambda = 1.0;
        loop {
            let mut trial = x;
            for i in 0..5 {
                trial[i] -= lambda * step[i];
            }
            if let Ok(gt) = g(&trial) {
                if trial[0] > 0.0 && merit(&gt, &scale) < base {
                    x = trial;
                    gx = gt;
                    break;
                }
            }
            lambda *= 0.5;
            if lambda < 1e-6 {
                return Err(Error::NonConvergence { iterations: 0, residual: current });
            }
        }
    }
    let residual = norm(&gx, &x);
    if residual >= opts.tol {
        return Err(Error::NonConvergence { iterations: NEWTON_MAX_ITER, residual });
    }
    finish(params, x, residual, 0)
}

/// Solves from a nearby converged state, falling back to [`solve`].
pub fn solve_near(params: &NoiseSystemParams, opts: &SolverOptions, near: &SelfConsistentState) -> Result<SelfConsistentState> {
    params.validate()?;
    opts.validate()?;
    newton(params, opts, near.core()).or_else(|_| solve(params, opts))
}

/// Largest continuation ratio in `γ`.
const MAX_CONTINUATION_RATIO: f64 = 2.0;

/// Tracks the solution from a large `γ` down to `params.gamma`.
///
/// Each step predicts the next point by linear extrapolation in `log γ` and
/// corrects it with Newton's method. Failed steps halve the ratio in log
/// scale; successful ones grow it back.
fn solve_by_continuation(params: &NoiseSystemParams, opts: &SolverOptions) -> Result<SelfConsistentState> {
    // Find an anchor where plain iteration converges.
    let mut anchor_gamma = params.gamma;
    let mut anchor = None;
    for _ in 0..40 {
        anchor_gamma *= 2.0;
        let at = params.with_gamma(anchor_gamma);
        if let Ok(s) = solve_from(&at, opts, initial_state(&at)) {
            anchor = Some(s);
            break;
        }
    }
    let mut state = anchor.ok_or(Error::NonConvergence { iterations: opts.max_iter, residual: f64::NAN })?;
    let mut gamma = anchor_gamma;
    let mut previous: Option<(f64, Core)> = None;
    let mut ratio: f64 = 2f64.powf(0.25);
    while gamma > params.gamma {
        let next = (gamma / ratio).max(params.gamma);
        let guess = match previous {
            Some((g0, x0)) => {
                let t = (next / gamma).ln() / (gamma / g0).ln();
                let x1 = state.core();
                let mut out = x1;
                for i in 0..5 {
                    out[i] = x1[i] + t * (x1[i] - x0[i]);
                }
                if out[0] > 0.0 { out } else { x1 }
            }
            None => state.core(),
        };
        match newton(&params.with_gamma(next), opts, guess) {
            Ok(s) => {
                previous = Some((gamma, state.core()));
                state = s;
                gamma = next;
                ratio = (ratio * ratio).min(MAX_CONTINUATION_RATIO);
            }
            Err(e) => {
                log::debug!("continuation step to gamma={next:e} failed: {e}");
                ratio = ratio.sqrt();
                if ratio < 1.0 + 1e-4 {
                    return Err(e);
                }
            }
        }
    }
    Ok(state)
}

/// Builds the full state at a converged core point.
fn finish(params: &NoiseSystemParams, x: Core, residual: f64, iterations: usize) -> Result<SelfConsistentState> {
    let vectors = base_vectors(params.c, params.a1);
    let lambda0 = lambda0(params.c, params.a1);
    let delta0 = delta0_matrix(x[0], x[1], x[2], x[3], x[4], params);
    let t = t_matrix(&delta0, &lambda0)?;
    let [d5, d6, d7] = tail_deltas(params, x[0], &t, &vectors);
    Ok(SelfConsistentState {
        m: x[0],
        delta: [x[1], x[2], x[3], x[4], d5, d6, d7],
        delta0,
        lambda0,
        t,
        vectors,
        residual,
        iterations,
        converged: true,
    })
}

/// How a [`DerivativeState`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeSource {
    Analytic,
    FiniteDifference,
}

/// Closed form used for `δ5'..δ7'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailDerivativeForm {
    /// Product-rule differentiation of the `δ5..δ7` formulas.
    Direct,
    /// The variant whose `δ7'` uses the offset `(a1/c)(1 + 1/c)`; kept as a diagnostic.
    OffsetOnePlusInvC,
}

/// `γ`-derivatives of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeState {
    /// `m'(γ)`.
    pub mp: f64,
    /// `δ1'..δ7'`.
    pub deltap: [f64; 7],
    pub delta0p: Matrix6<f64>,
    pub tp: Matrix6<f64>,
    pub source: DerivativeSource,
}

impl DerivativeState {
    /// `[m', δ1', …, δ7']`.
    pub fn as_array(&self) -> [f64; 8] {
        let d = self.deltap;
        [self.mp, d[0], d[1], d[2], d[3], d[4], d[5], d[6]]
    }
}

/// Relative tolerance of the finite-difference gate on analytic derivatives.
pub const FD_GATE_REL_TOL: f64 = 1e-4;

/// Everything the derivative formulas need besides the primed unknowns.
struct DerivContext<'a> {
    params: &'a NoiseSystemParams,
    state: &'a SelfConsistentState,
    left: Matrix6<f64>,
    right: Matrix6<f64>,
}

impl<'a> DerivContext<'a> {
    fn new(params: &'a NoiseSystemParams, state: &'a SelfConsistentState) -> Result<Self> {
        let right = resolvent_factor(state.lambda0 * state.delta0)?;
        let left = resolvent_factor(state.delta0 * state.lambda0)?;
        Ok(Self { params, state, left, right })
    }

    /// `Δ₀'` for primed core unknowns `xp`.
    fn delta0p(&self, xp: &Core) -> Matrix6<f64> {
        let (c, gamma) = (self.params.c, self.params.gamma);
        let gp = -(self.state.m + gamma * xp[0]) / (c * c);
        delta0_from(xp[0] / c, [xp[1], xp[2], xp[3], xp[4]], gp, self.params.a1, self.params.nu)
    }

    fn tp(&self, xp: &Core) -> Matrix6<f64> {
        let tp = self.left * self.delta0p(xp) * self.right;
        (tp + tp.transpose()) * 0.5
    }

    /// Right-hand sides of the derivative system at the primed guess `xp`.
    fn rhs(&self, xp: &Core) -> Core {
        let (c, a1) = (self.params.c, self.params.a1);
        let s = self.state;
        let b = &s.vectors;
        let m = s.m;
        let d1 = s.delta[0];
        let tp = self.tp(xp);
        let q = |x: &Vector6<f64>, y: &Vector6<f64>| x.dot(&(tp * y));
        let pr = Products::new(&s.t, b);

        let (mp, d1p) = (xp[0], xp[1]);
        let mp_new = (q(&b.v, &b.v) - 1.0 / c) * m * m;
        let cd1p = -mp * pr.vtv1 - m * q(&b.v, &b.v1);
        let cd2p = q(&b.v2, &(b.v1 - b.v * (c * d1))) + c * d1p * (1.0 - pr.v2tv);
        let cd3p = q(&b.v1, &b.v1) + c * c * d1 * (2.0 * d1p * m - d1 * mp) / (m * m);
        let e4 = pr.v4tv - a1 / c;
        let cd4p = q(&b.v4, &b.v4) + mp * e4 * e4 + 2.0 * m * e4 * q(&b.v4, &b.v);
        [mp_new, cd1p / c, cd2p / c, cd3p / c, cd4p / c]
    }

    fn tail(&self, xp: &Core, tp: &Matrix6<f64>, form: TailDerivativeForm) -> [f64; 3] {
        let (c, a1) = (self.params.c, self.params.a1);
        let s = self.state;
        let b = &s.vectors;
        let (m, mp) = (s.m, xp[0]);
        let pr = Products::new(&s.t, b);
        let q = |x: &Vector6<f64>, y: &Vector6<f64>| x.dot(&(tp * y));
        let e2 = pr.v2tv - 1.0;
        let e4 = pr.v4tv - a1 / c;
        let offset = match form {
            TailDerivativeForm::Direct => 2.0 + 1.0 / c,
            TailDerivativeForm::OffsetOnePlusInvC => 1.0 + 1.0 / c,
        };
        let e7 = pr.v7tv - (a1 / c) * offset;
        let (v2p, v4p, v7p) = (q(&b.v2, &b.v), q(&b.v4, &b.v), q(&b.v7, &b.v));
        let cd5p = -mp * e2 - m * v2p;
        let cd6p = q(&b.v4, &b.v2) + mp * e2 * e4 + m * v2p * e4 + m * e2 * v4p;
        let cd7p = q(&b.v4, &b.v7) + mp * e4 * e7 + m * v4p * e7 + m * e4 * v7p;
        [cd5p / c, cd6p / c, cd7p / c]
    }
}

/// Analytic derivatives with an explicit choice of tail form and no gate.
pub fn analytic_derivatives(
    state: &SelfConsistentState,
    params: &NoiseSystemParams,
    form: TailDerivativeForm,
) -> Result<DerivativeState> {
    let ctx = DerivContext::new(params, state)?;
    // The system is affine in the primed unknowns: x = A x + b.
    let zero = [0.0; 5];
    let b0 = ctx.rhs(&zero);
    // Symmetric columns keep the result exactly mirror-symmetric under a1 -> -a1.
    let mut a = Matrix5::zeros();
    for j in 0..5 {
        let (mut ep, mut em) = (zero, zero);
        ep[j] = 1.0;
        em[j] = -1.0;
        let (cp, cm) = (ctx.rhs(&ep), ctx.rhs(&em));
        for i in 0..5 {
            a[(i, j)] = 0.5 * (cp[i] - cm[i]);
        }
    }
    let lhs = Matrix5::identity() - a;
    let rhs = Vector5::from_column_slice(&b0);
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or(Error::SolverBreakdown { context: "derivative system is singular".into(), condition: f64::INFINITY })?;
    let xp: Core = [sol[0], sol[1], sol[2], sol[3], sol[4]];
    check_finite(&xp, "derivative")?;
    let delta0p = ctx.delta0p(&xp);
    let tp = ctx.tp(&xp);
    let [d5p, d6p, d7p] = ctx.tail(&xp, &tp, form);
    Ok(DerivativeState {
        mp: xp[0],
        deltap: [xp[1], xp[2], xp[3], xp[4], d5p, d6p, d7p],
        delta0p,
        tp,
        source: DerivativeSource::Analytic,
    })
}

/// Central-difference derivatives from two full solves at `γ(1 ± h)`.
pub fn fd_derivatives(params: &NoiseSystemParams, opts: &SolverOptions) -> Result<DerivativeState> {
    let centre = solve(params, opts)?;
    fd_derivatives_near(params, opts, &centre)
}

/// Central differences whose two solves start from the converged `state`.
pub fn fd_derivatives_near(
    params: &NoiseSystemParams,
    opts: &SolverOptions,
    state: &SelfConsistentState,
) -> Result<DerivativeState> {
    let h = opts.fd_step_rel;
    let lo = solve_near(&params.with_gamma(params.gamma * (1.0 - h)), opts, state)?;
    let hi = solve_near(&params.with_gamma(params.gamma * (1.0 + h)), opts, state)?;
    let step = 2.0 * params.gamma * h;
    let mut deltap = [0.0; 7];
    for (k, d) in deltap.iter_mut().enumerate() {
        *d = (hi.delta[k] - lo.delta[k]) / step;
    }
    Ok(DerivativeState {
        mp: (hi.m - lo.m) / step,
        deltap,
        delta0p: (hi.delta0 - lo.delta0) / step,
        tp: (hi.t - lo.t) / step,
        source: DerivativeSource::FiniteDifference,
    })
}

/// Largest componentwise relative gap between two derivative states.
///
/// Components whose magnitude is tiny relative to the largest component are
/// compared against that scale instead of themselves.
pub fn relative_gap(a: &DerivativeState, b: &DerivativeState) -> f64 {
    let (x, y) = (a.as_array(), b.as_array());
    let scale = x.iter().chain(&y).fold(0.0f64, |s, v| s.max(v.abs()));
    x.iter()
        .zip(&y)
        .map(|(u, v)| (u - v).abs() / u.abs().max(v.abs()).max(1e-6 * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Analytic derivatives, verified against central differences.
///
/// Falls back to the finite-difference result, with a warning, when any
/// component disagrees by more than [`FD_GATE_REL_TOL`].
pub fn derivatives(
    state: &SelfConsistentState,
    params: &NoiseSystemParams,
    opts: &SolverOptions,
) -> Result<DerivativeState> {
    let analytic = analytic_derivatives(state, params, TailDerivativeForm::Direct)?;
    let fd = fd_derivatives_near(params, opts, state)?;
    let gap = relative_gap(&analytic, &fd);
    if gap > FD_GATE_REL_TOL {
        log::warn!(
            "analytic derivatives deviate from finite differences by {gap:.3e} at c={}, gamma={}; using finite differences",
            params.c,
            params.gamma
        );
        return Ok(fd);
    }
    Ok(analytic)
}
