//! Deterministic-equivalent prediction of the memorization error.
//!
//! The attention prediction assembles two symmetric 9×9 matrices, `Λ` (signal
//! couplings) and `Δ(γ)` (noise-only resolvent traces from
//! [`crate::selfconsistent`]), and differentiates a quadratic form in `γ`.
//! The ridge baseline uses the Marčenko–Pastur Stieltjes transform in closed form.

use nalgebra::{Matrix3, SMatrix, SVector};

use crate::error::{invalid, Error, Result};
use crate::selfconsistent::{
    derivatives, solve, DerivativeState, NoiseSystemParams, SelfConsistentState, SolverOptions,
};

/// 9×9 real matrix.
pub type Matrix9 = SMatrix<f64, 9, 9>;
/// 9-vector.
pub type Vector9 = SVector<f64, 9>;

/// Inner products between the signal `μ` and the rank-one key/query directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalAlignment {
    /// `‖μ‖²`, the SNR.
    pub mu2: f64,
    /// `μᵀw_K`.
    pub muwk: f64,
    /// `μᵀw_Q`.
    pub muwq: f64,
    /// `‖w_K‖²`.
    pub wk2: f64,
    /// `‖w_Q‖²`.
    pub wq2: f64,
    /// `w_Kᵀw_Q`.
    pub wkwq: f64,
    /// `‖μ‖² + μᵀw_K μᵀw_Q`.
    pub t1: f64,
}

impl SignalAlignment {
    /// Builds an alignment, checking the Cauchy–Schwarz constraints.
    pub fn new(mu2: f64, muwk: f64, muwq: f64, wk2: f64, wq2: f64, wkwq: f64) -> Result<Self> {
        let vals = [mu2, muwk, muwq, wk2, wq2, wkwq];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(invalid("alignment scalars must be finite"));
        }
        if mu2 < 0.0 || wk2 < 0.0 || wq2 < 0.0 {
            return Err(invalid("squared norms must be non-negative"));
        }
        let slack = |a: f64, b: f64| 1e-9 * (a * b).abs().max(1e-300) + 1e-12;
        if muwk * muwk > mu2 * wk2 + slack(mu2, wk2)
            || muwq * muwq > mu2 * wq2 + slack(mu2, wq2)
            || wkwq * wkwq > wk2 * wq2 + slack(wk2, wq2)
        {
            return Err(invalid("alignment scalars violate Cauchy–Schwarz"));
        }
        Ok(Self { mu2, muwk, muwq, wk2, wq2, wkwq, t1: mu2 + muwk * muwq })
    }

    /// `μ = w_K = w_Q = 0`.
    pub fn null() -> Self {
        Self { mu2: 0.0, muwk: 0.0, muwq: 0.0, wk2: 0.0, wq2: 0.0, wkwq: 0.0, t1: 0.0 }
    }

    /// `w_K = w_Q = 0` with `‖μ‖² = snr`.
    pub fn signal_only(snr: f64) -> Result<Self> {
        Self::new(snr, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    /// `w_K = w_Q = μ` with `‖μ‖² = snr`.
    pub fn aligned(snr: f64) -> Result<Self> {
        Self::new(snr, snr, snr, snr, snr, snr)
    }

    /// Unit-norm `w_K = w_Q` and `μ` along them with `‖μ‖² = snr`.
    pub fn aligned_unit(snr: f64) -> Result<Self> {
        let s = snr.max(0.0).sqrt();
        Self::new(snr, s, s, 1.0, 1.0, 1.0)
    }

    /// Unit-norm `w_K ⊥ w_Q`, both orthogonal to `μ`, with `‖μ‖² = snr`.
    pub fn orthogonal_unit(snr: f64) -> Result<Self> {
        Self::new(snr, 0.0, 0.0, 1.0, 1.0, 0.0)
    }
}

/// How `μ`, `w_K` and `w_Q` are placed relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlignmentMode {
    /// `μ = w_K = w_Q = 0`.
    Null,
    /// `w_K = w_Q = 0`.
    SignalOnly,
    /// `w_K = w_Q = μ`.
    Aligned,
    /// Unit `w_K = w_Q` with `μ` along them.
    AlignedUnit,
    /// Unit `w_K ⊥ w_Q`, both orthogonal to `μ`.
    Orthogonal,
}

impl AlignmentMode {
    /// Every mode, in declaration order.
    pub const ALL: [AlignmentMode; 5] =
        [Self::Null, Self::SignalOnly, Self::Aligned, Self::AlignedUnit, Self::Orthogonal];

    /// Identifier used in configs and CSV files.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Null => "null",
            Self::SignalOnly => "signal-only",
            Self::Aligned => "aligned",
            Self::AlignedUnit => "aligned-unit",
            Self::Orthogonal => "orthogonal",
        }
    }

    /// Inner products of this mode at `‖μ‖² = snr`; `Null` ignores `snr`.
    pub fn alignment(&self, snr: f64) -> Result<SignalAlignment> {
        match self {
            Self::Null => Ok(SignalAlignment::null()),
            Self::SignalOnly => SignalAlignment::signal_only(snr),
            Self::Aligned => SignalAlignment::aligned(snr),
            Self::AlignedUnit => SignalAlignment::aligned_unit(snr),
            Self::Orthogonal => SignalAlignment::orthogonal_unit(snr),
        }
    }
}

impl std::str::FromStr for AlignmentMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
            invalid(format!("unknown alignment mode '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

impl std::fmt::Display for AlignmentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `Σ_K = a1 [[T1, 1, μᵀw_K], [1, 0, 0], [μᵀw_Q, 0, 1]]`.
pub fn sigma_k(align: &SignalAlignment, a1: f64) -> Matrix3<f64> {
    Matrix3::new(align.t1, 1.0, align.muwk, 1.0, 0.0, 0.0, align.muwq, 0.0, 1.0) * a1
}

/// `Σ_X = c [[‖μ‖², 1, 0], [1, 0, 0], [0, 0, 0]]`.
pub fn sigma_x(align: &SignalAlignment, c: f64) -> Matrix3<f64> {
    Matrix3::new(align.mu2, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0) * c
}

fn set_block(a: &mut Matrix9, bi: usize, bj: usize, b: &Matrix3<f64>) {
    a.fixed_view_mut::<3, 3>(3 * bi, 3 * bj).copy_from(b);
    if bi != bj {
        a.fixed_view_mut::<3, 3>(3 * bj, 3 * bi).copy_from(&b.transpose());
    }
}

/// The symmetric signal-coupling matrix `Λ`.
pub fn lambda9(align: &SignalAlignment, c: f64, a1: f64) -> Matrix9 {
    let SignalAlignment { mu2, muwk, muwq, wk2, t1, .. } = *align;
    let l23 = Matrix3::new(
        (mu2 + 1.0) * t1,
        mu2,
        muwk * (mu2 + 1.0),
        t1,
        1.0,
        muwk,
        0.0,
        0.0,
        0.0,
    ) * a1;
    let big = (2.0 + c + mu2) / c;
    let mid = (1.0 + c + mu2) / c;
    let small = (1.0 + c) / c;
    let cross = muwk + muwq * wk2;
    let l11 = big * t1 * t1 + small * t1 + small * muwq * cross;
    let l21 = mid * t1;
    let l22 = 1.0 + mu2 / c;
    let l23s = mid * muwk;
    let l31 = big * muwk * t1 + small * cross;
    let l33 = big * muwk * muwk + small * wk2;
    let l33b = Matrix3::new(l11, l21, l31, l21, l22, l23s, l31, l23s, l33) * (a1 * a1);

    let mut l = Matrix9::zeros();
    set_block(&mut l, 0, 2, &sigma_k(align, a1));
    set_block(&mut l, 1, 1, &sigma_x(align, c));
    set_block(&mut l, 1, 2, &l23);
    set_block(&mut l, 2, 2, &l33b);
    l
}

/// Scalars `Δ(γ)` depends on, so that `Δ'` reuses the same assembly.
#[derive(Debug, Clone, Copy)]
struct DeltaInputs {
    m: f64,
    d: [f64; 7],
    /// `1 - γ m / c`, or its derivative.
    g: f64,
}

fn delta9_from(x: &DeltaInputs, align: &SignalAlignment, c: f64) -> Matrix9 {
    let SignalAlignment { mu2, muwk, muwq, wk2, wq2, wkwq, .. } = *align;
    let [d1, d2, d3, d4, d5, d6, d7] = x.d;
    let gram_k = |s: f64, head: f64| Matrix3::new(head, 0.0, 0.0, 0.0, s * mu2, s * muwk, 0.0, s * muwk, s * wk2);
    let gram_q = |s: f64, head: f64| Matrix3::new(head, 0.0, 0.0, 0.0, s * mu2, s * muwq, 0.0, s * muwq, s * wq2);
    let cross = |s: f64, head: f64| Matrix3::new(head, 0.0, 0.0, 0.0, s * mu2, s * muwq, 0.0, s * muwk, s * wkwq);

    let b11 = gram_k(c * c * d7, c * c * d4);
    let b12 = gram_k(c * d4, x.g);
    let b13 = cross(c * d6, c * d2);
    let b22 = gram_k(x.g / c, d3);
    let b23 = cross(d2, d1);
    let b33 = gram_q(d5, x.m / c);

    let mut a = Matrix9::zeros();
    set_block(&mut a, 0, 0, &b11);
    set_block(&mut a, 0, 1, &b12);
    set_block(&mut a, 0, 2, &b13);
    set_block(&mut a, 1, 1, &b22);
    set_block(&mut a, 1, 2, &b23);
    set_block(&mut a, 2, 2, &b33);
    a
}

/// The symmetric resolvent-trace matrix `Δ(γ)`.
pub fn delta9(state: &SelfConsistentState, align: &SignalAlignment, c: f64, gamma: f64) -> Matrix9 {
    let x = DeltaInputs { m: state.m, d: state.delta, g: 1.0 - gamma * state.m / c };
    delta9_from(&x, align, c)
}

/// Entrywise `γ`-derivative of [`delta9`].
pub fn delta9_prime(
    state: &SelfConsistentState,
    deriv: &DerivativeState,
    align: &SignalAlignment,
    c: f64,
    gamma: f64,
) -> Matrix9 {
    let x = DeltaInputs { m: deriv.mp, d: deriv.deltap, g: -(state.m + gamma * deriv.mp) / c };
    delta9_from(&x, align, c)
}

/// Index of `y/√p` in the 9-dimensional basis (0-based).
pub const Y_INDEX: usize = 6;

/// The three matrices behind the attention prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryBlocks {
    pub lambda: Matrix9,
    pub delta: Matrix9,
    pub delta_prime: Matrix9,
    pub e7: Vector9,
}

impl TheoryBlocks {
    /// Assembles all blocks from a solved state and its derivatives.
    pub fn new(
        params: &NoiseSystemParams,
        state: &SelfConsistentState,
        deriv: &DerivativeState,
        align: &SignalAlignment,
    ) -> Self {
        let (c, gamma) = (params.c, params.gamma);
        Self {
            lambda: lambda9(align, c, params.a1),
            delta: delta9(state, align, c, gamma),
            delta_prime: delta9_prime(state, deriv, align, c, gamma),
            e7: Vector9::ith(Y_INDEX, 1.0),
        }
    }

    /// Quadratic form `c · e7ᵀ Δ (s I + Λ Δ)⁻¹ e7` for shift `s`.
    fn q_form(&self, c: f64, shift: f64) -> Result<(f64, f64)> {
        let (inv_r, cond) = shifted_inverse(shift, &(self.lambda * self.delta))?;
        Ok((c * (self.delta * inv_r * self.e7)[Y_INDEX], cond))
    }

    /// `e7ᵀ (s I + Δ Λ)⁻¹ Δ' (s I + Λ Δ)⁻¹ e7`, with both condition numbers.
    fn sandwich(&self, shift: f64) -> Result<(f64, f64, f64)> {
        let (inv_l, cond_l) = shifted_inverse(shift, &(self.delta * self.lambda))?;
        let (inv_r, cond_r) = shifted_inverse(shift, &(self.lambda * self.delta))?;
        let val = (inv_l * self.delta_prime * inv_r * self.e7)[Y_INDEX];
        Ok((val, cond_l, cond_r))
    }
}

fn shifted_inverse(shift: f64, a: &Matrix9) -> Result<(Matrix9, f64)> {
    let m = Matrix9::identity() * shift + a;
    let sv = m.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::SolverBreakdown { context: "9×9 theory system is singular".into(), condition: cond });
    }
    let inv = m
        .try_inverse()
        .ok_or(Error::SolverBreakdown { context: "9×9 theory system is singular".into(), condition: cond })?;
    Ok((inv, cond))
}

/// Which normalization of the error formula produced [`ErrorPrediction::e_bar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorPath {
    /// `-γ² c² e7ᵀ (cI + ΔΛ)⁻¹ Δ' (cI + ΛΔ)⁻¹ e7`.
    ShiftC,
    /// `-γ² c e7ᵀ (I + ΔΛ)⁻¹ Δ' (I + ΛΔ)⁻¹ e7`, the derivative of `q = c e7ᵀ Δ (I + ΛΔ)⁻¹ e7`.
    ShiftOne,
}

/// Normalization used for reported predictions; selected by regression against reference curves.
pub const CANONICAL_PATH: ErrorPath = ErrorPath::ShiftC;

/// Predicted memorization error with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorPrediction {
    /// The canonical prediction `Ē`.
    pub e_bar: f64,
    /// Deterministic equivalent of `(1/n) yᵀ Q y` in the canonical normalization.
    pub q_value: f64,
    pub path: ErrorPath,
    /// `Ē` from the `c`-shifted formula.
    pub e_shift_c: f64,
    /// `Ē` from the unit-shifted formula.
    pub e_shift_one: f64,
    /// Condition numbers of the two 9×9 solves in the canonical path.
    pub condition: (f64, f64),
    pub state: SelfConsistentState,
    pub deriv: DerivativeState,
}

/// Solves the noise system and evaluates `Ē` for the given signal alignment.
pub fn attention_error(
    params: &NoiseSystemParams,
    align: &SignalAlignment,
    opts: &SolverOptions,
) -> Result<ErrorPrediction> {
    let state = solve(params, opts)?;
    let deriv = derivatives(&state, params, opts)?;
    attention_error_from(params, align, state, deriv)
}

/// Evaluates `Ē` from an already solved state and its derivatives.
pub fn attention_error_from(
    params: &NoiseSystemParams,
    align: &SignalAlignment,
    state: SelfConsistentState,
    deriv: DerivativeState,
) -> Result<ErrorPrediction> {
    let (c, gamma) = (params.c, params.gamma);
    let blocks = TheoryBlocks::new(params, &state, &deriv, align);
    let (sc, cl_c, cr_c) = blocks.sandwich(c)?;
    let (s1, cl_1, cr_1) = blocks.sandwich(1.0)?;
    let e_shift_c = -gamma * gamma * c * c * sc;
    let e_shift_one = -gamma * gamma * c * s1;
    let (e_bar, shift, condition) = match CANONICAL_PATH {
        ErrorPath::ShiftC => (e_shift_c, c, (cl_c, cr_c)),
        ErrorPath::ShiftOne => (e_shift_one, 1.0, (cl_1, cr_1)),
    };
    let (q_value, _) = blocks.q_form(c, shift)?;
    if !e_bar.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite error prediction at c={c}, gamma={gamma}")));
    }
    Ok(ErrorPrediction {
        e_bar,
        q_value,
        path: CANONICAL_PATH,
        e_shift_c,
        e_shift_one,
        condition,
        state,
        deriv,
    })
}

/// Deterministic equivalent of `(1/n) yᵀ Q y` in the canonical normalization, for finite differences.
pub fn attention_q(params: &NoiseSystemParams, align: &SignalAlignment, opts: &SolverOptions) -> Result<f64> {
    let state = solve(params, opts)?;
    let zero = DerivativeState {
        mp: 0.0,
        deltap: [0.0; 7],
        delta0p: Default::default(),
        tp: Default::default(),
        source: crate::selfconsistent::DerivativeSource::Analytic,
    };
    let blocks = TheoryBlocks::new(params, &state, &zero, align);
    let shift = match CANONICAL_PATH {
        ErrorPath::ShiftC => params.c,
        ErrorPath::ShiftOne => 1.0,
    };
    Ok(blocks.q_form(params.c, shift)?.0)
}

/// Marčenko–Pastur Stieltjes transform `m_RR(γ)` and its derivative.
///
/// `m_RR` is the positive root of `cγm² + (1 - c + γ)m - 1 = 0`.
pub fn mp_stieltjes(c: f64, gamma: f64) -> Result<(f64, f64)> {
    if !(c > 0.0 && gamma > 0.0 && c.is_finite() && gamma.is_finite()) {
        return Err(invalid(format!("need c > 0 and gamma > 0, got c={c}, gamma={gamma}")));
    }
    let b = 1.0 - c + gamma;
    let disc = (b * b + 4.0 * c * gamma).sqrt();
    // Rationalized root, stable when b > 0 dominates.
    let m = if b > 0.0 { 2.0 / (b + disc) } else { (disc - b) / (2.0 * c * gamma) };
    let mp = -(c * m * m + m) / (2.0 * c * gamma * m + b);
    Ok((m, mp))
}

/// Ridge-regression memorization error `Ē_RR(γ)` at dimension ratio `c` and SNR `‖μ‖²`.
pub fn ridge_error(c: f64, gamma: f64, snr: f64) -> Result<f64> {
    if !(snr >= 0.0 && snr.is_finite()) {
        return Err(invalid(format!("snr must be non-negative, got {snr}")));
    }
    let (m, mp) = mp_stieltjes(c, gamma)?;
    let num = c * gamma * gamma * mp + c - 1.0 + snr * (gamma * gamma * mp + (1.0 - c - gamma) * (gamma * m - 1.0));
    let den = 1.0 + snr - snr * gamma * m;
    Ok(-num / (den * den))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_k_at_zero_alignment() {
        let s = sigma_k(&SignalAlignment::null(), 1.0);
        assert_eq!(s, Matrix3::new(0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(sigma_k(&SignalAlignment::aligned(1.0).unwrap(), 0.0), Matrix3::zeros());
    }

    #[test]
    fn lambda9_block_structure() {
        let al = SignalAlignment::new(1.3, 0.4, -0.2, 0.8, 0.5, 0.1).unwrap();
        let l = lambda9(&al, 2.0, 0.6);
        assert_eq!(l, l.transpose());
        assert_eq!(l.fixed_view::<3, 3>(0, 0).into_owned(), Matrix3::zeros());
        assert_eq!(l.fixed_view::<3, 3>(0, 6).into_owned(), sigma_k(&al, 0.6));
        assert_eq!(l.fixed_view::<3, 3>(3, 3).into_owned(), sigma_x(&al, 2.0));
    }

    #[test]
    fn mp_root_at_unit_values() {
        let (m, _) = mp_stieltjes(1.0, 1.0).unwrap();
        assert!((m - (5f64.sqrt() - 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn alignment_rejects_cauchy_schwarz_violation() {
        assert!(SignalAlignment::new(1.0, 2.0, 0.0, 1.0, 1.0, 0.0).is_err());
    }
}
