//! Activation functions and their Gaussian Hermite moments.
//!
//! Expectations are taken under a standard normal `ξ`. Smooth maps use a
//! Gauss–Hermite rule for the weight `exp(-t²/2)/√(2π)`; maps with kinks use a
//! composite rule whose pieces end at the kinks.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{invalid, Error, Result};

/// Default number of quadrature nodes used by [`moments`].
pub const DEFAULT_NODES: usize = 200;

/// Names accepted by [`catalog`].
pub const CATALOG_NAMES: [&str; 5] = ["tanh", "clamped-linear", "clamped-exp", "cos", "hermite-mix"];

/// Quadrature rule for expectations under the standard normal measure.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Builds the `k`-node Gauss–Hermite rule, exact for polynomials up to degree `2k - 1`.
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid(format!("quadrature needs at least 2 nodes, got {k}")));
        }
        // Golub–Welsch start, then Newton polishing on the orthonormal recurrence.
        let jacobi = DMatrix::from_fn(k, k, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let mut nodes: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
        nodes.sort_by(|a, b| a.total_cmp(b));

        let mut weights = vec![0.0; k];
        for (x, w) in nodes.iter_mut().zip(weights.iter_mut()) {
            for _ in 0..4 {
                let (pk, dpk, _) = orthonormal_hermite(k, *x);
                if dpk == 0.0 {
                    break;
                }
                let step = pk / dpk;
                *x -= step;
                if step.abs() <= 1e-16 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, _, sumsq) = orthonormal_hermite(k, *x);
            *w = 1.0 / sumsq;
        }

        // Enforce exact mirror symmetry so odd integrands vanish to rounding.
        for i in 0..k / 2 {
            let j = k - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if k % 2 == 1 {
            nodes[k / 2] = 0.0;
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { nodes, weights })
    }

    /// Quadrature nodes in increasing order.
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Quadrature weights; they sum to one up to rounding.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Number of nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Always false; a rule has at least two nodes.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximates `E[g(ξ)]` for `ξ ~ N(0, 1)`.
    pub fn expect(&self, g: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * g(x)).sum()
    }
}

/// Returns `(p_k(x), p_k'(x), Σ_{j<k} p_j(x)²)` for the orthonormal Hermite family.
fn orthonormal_hermite(k: usize, x: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = 1.0;
    let mut sumsq = 0.0;
    for j in 0..k {
        sumsq += cur * cur;
        let next = (x * cur - (j as f64).sqrt() * prev) / ((j + 1) as f64).sqrt();
        prev = cur;
        cur = next;
    }
    (cur, (k as f64).sqrt() * prev, sumsq)
}

/// Half-width of the window used by [`GaussHermite::piecewise`]; the normal mass outside is below 1e-37.
const PIECEWISE_HALF_WIDTH: f64 = 13.0;

impl GaussHermite {
    /// Composite rule for the standard normal measure that places interval ends at `breaks`.
    ///
    /// Each piece of `[-13, 13]` between consecutive breakpoints gets a `k`-node
    /// Gauss–Legendre rule weighted by the normal density, so integrands that are
    /// smooth between the breakpoints are integrated to near machine precision.
    pub fn piecewise(breaks: &[f64], k: usize) -> Result<Self> {
        let (lx, lw) = gauss_legendre(k)?;
        let mut edges: Vec<f64> = breaks
            .iter()
            .copied()
            .filter(|b| b.is_finite() && b.abs() < PIECEWISE_HALF_WIDTH)
            .collect();
        edges.push(-PIECEWISE_HALF_WIDTH);
        edges.push(PIECEWISE_HALF_WIDTH);
        edges.sort_by(|a, b| a.total_cmp(b));
        edges.dedup();
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        let mut nodes = Vec::with_capacity(k * (edges.len() - 1));
        let mut weights = Vec::with_capacity(nodes.capacity());
        for pair in edges.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (&x, &w) in lx.iter().zip(&lw) {
                let t = mid + half * x;
                nodes.push(t);
                weights.push(w * half * norm * (-0.5 * t * t).exp());
            }
        }
        Ok(Self { nodes, weights })
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if k < 2 {
        return Err(invalid(format!("quadrature needs at least 2 nodes, got {k}")));
    }
    let mut nodes = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for i in 0..k {
        // Tricomi initial guess followed by Newton on the three-term recurrence.
        let theta = std::f64::consts::PI * (4 * i + 3) as f64 / (4 * k + 2) as f64;
        let mut x = -theta.cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre(k, x);
            dp = d;
            let step = p / d;
            x -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(k, x);
        if d != 0.0 {
            dp = d;
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    Ok((nodes, weights))
}

/// Returns `(P_k(x), P_k'(x))`.
fn legendre(k: usize, x: f64) -> (f64, f64) {
    let mut prev = 1.0;
    let mut cur = x;
    for j in 1..k {
        let jf = j as f64;
        let next = ((2.0 * jf + 1.0) * x * cur - jf * prev) / (jf + 1.0);
        prev = cur;
        cur = next;
    }
    let kf = k as f64;
    (cur, kf * (x * cur - prev) / (x * x - 1.0))
}

/// Convenience wrapper around [`GaussHermite::new`] returning nodes and weights.
pub fn gauss_hermite_rule(k: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let rule = GaussHermite::new(k)?;
    Ok((rule.nodes, rule.weights))
}

/// The scalar map behind a [`Nonlinearity`].
#[derive(Clone)]
pub enum Shape {
    /// `t`; unbounded, useful as a reference.
    Identity,
    /// `tanh(t)`.
    Tanh,
    /// `max(-bound, min(bound, t))`.
    ClampedLinear { bound: f64 },
    /// `min(exp(t), cap)`.
    ClampedExp { cap: f64 },
    /// `cos(t)`.
    Cos,
    /// `max(-5, min(5, r t + √(1-r²)(t³-3t)/√6))`.
    HermiteMix { r: f64 },
    /// A caller-supplied map with its claimed sup-norm bound and kink locations.
    Custom { f: Arc<dyn Fn(f64) -> f64 + Send + Sync>, bound: f64, kinks: Vec<f64> },
}

impl fmt::Debug for Shape {
    fn fmt(&self, fmt: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Identity => write!(fmt, "Identity"),
            Shape::Tanh => write!(fmt, "Tanh"),
            Shape::ClampedLinear { bound } => write!(fmt, "ClampedLinear {{ bound: {bound} }}"),
            Shape::ClampedExp { cap } => write!(fmt, "ClampedExp {{ cap: {cap} }}"),
            Shape::Cos => write!(fmt, "Cos"),
            Shape::HermiteMix { r } => write!(fmt, "HermiteMix {{ r: {r} }}"),
            Shape::Custom { bound, .. } => write!(fmt, "Custom {{ bound: {bound} }}"),
        }
    }
}

const HERMITE_MIX_BOUND: f64 = 5.0;

impl Shape {
    /// Points where the map is not differentiable.
    pub fn kinks(&self) -> Vec<f64> {
        match self {
            Shape::ClampedLinear { bound } => vec![-bound, *bound],
            Shape::ClampedExp { cap } => vec![cap.ln()],
            Shape::HermiteMix { r } => {
                let t = hermite_mix_crossing(*r);
                vec![-t, t]
            }
            Shape::Custom { kinks, .. } => kinks.clone(),
            _ => Vec::new(),
        }
    }

    fn raw(&self, t: f64) -> f64 {
        match self {
            Shape::Identity => t,
            Shape::Tanh => t.tanh(),
            Shape::ClampedLinear { bound } => t.clamp(-bound, *bound),
            Shape::ClampedExp { cap } => t.exp().min(*cap),
            Shape::Cos => t.cos(),
            Shape::HermiteMix { r } => {
                let cubic = (t * t * t - 3.0 * t) / 6f64.sqrt();
                (r * t + (1.0 - r * r).sqrt() * cubic).clamp(-HERMITE_MIX_BOUND, HERMITE_MIX_BOUND)
            }
            Shape::Custom { f, .. } => f(t),
        }
    }
}

/// Positive `t` where the unclamped hermite-mix polynomial reaches the clamp level.
///
/// Its local extrema have magnitude at most `2/√6 < 5`, so the crossing is unique.
fn hermite_mix_crossing(r: f64) -> f64 {
    let s = (1.0 - r * r).sqrt() / 6f64.sqrt();
    let g = |t: f64| r * t + s * (t * t * t - 3.0 * t) - HERMITE_MIX_BOUND;
    let (mut lo, mut hi) = (0.0, 2.0 * HERMITE_MIX_BOUND);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// An activation applied entrywise to the attention score matrix.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    name: String,
    shape: Shape,
    center_shift: f64,
}

impl Nonlinearity {
    fn from_shape(name: &str, shape: Shape) -> Self {
        Self { name: name.to_string(), shape, center_shift: 0.0 }
    }

    /// The identity map `t ↦ t`.
    pub fn identity() -> Self {
        Self::from_shape("identity", Shape::Identity)
    }

    /// `tanh`.
    pub fn tanh() -> Self {
        Self::from_shape("tanh", Shape::Tanh)
    }

    /// `max(-bound, min(bound, t))`.
    pub fn clamped_linear(bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("clamp bound must be positive and finite, got {bound}")));
        }
        Ok(Self::from_shape("clamped-linear", Shape::ClampedLinear { bound }))
    }

    /// `min(exp(t), cap)`.
    pub fn clamped_exp(cap: f64) -> Result<Self> {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(invalid(format!("exp cap must be positive and finite, got {cap}")));
        }
        Ok(Self::from_shape("clamped-exp", Shape::ClampedExp { cap }))
    }

    /// `cos`.
    pub fn cos() -> Self {
        Self::from_shape("cos", Shape::Cos)
    }

    /// Clamped mixture of the first and third Hermite polynomials with weight `r` on the first.
    pub fn hermite_mix(r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&r) {
            return Err(invalid(format!("hermite-mix coefficient r must lie in [0, 1], got {r}")));
        }
        Ok(Self::from_shape("hermite-mix", Shape::HermiteMix { r }))
    }

    /// Wraps a user map whose absolute value never exceeds `bound`.
    pub fn custom(name: &str, bound: f64, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("custom nonlinearity needs a finite positive bound, got {bound}")));
        }
        Ok(Self::from_shape(name, Shape::Custom { f: Arc::new(f), bound, kinks: Vec::new() }))
    }

    /// Identifier of the map.
    pub fn name(&self) -> &str {
        &self.name
    }

    /// The underlying map.
    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    /// Named real parameters of the map.
    pub fn params(&self) -> Vec<(&'static str, f64)> {
        match &self.shape {
            Shape::ClampedLinear { bound } => vec![("bound", *bound)],
            Shape::ClampedExp { cap } => vec![("cap", *cap)],
            Shape::HermiteMix { r } => vec![("r", *r)],
            Shape::Custom { bound, .. } => vec![("bound", *bound)],
            _ => Vec::new(),
        }
    }

    /// The constant already subtracted from the raw map.
    pub fn center_shift(&self) -> f64 {
        self.center_shift
    }

    /// Evaluates `f(t) - center_shift`.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        self.shape.raw(t) - self.center_shift
    }

    /// Upper bound on `|eval(t)|`, or `None` for the unbounded identity.
    pub fn bound(&self) -> Option<f64> {
        let raw = match &self.shape {
            Shape::Identity => return None,
            Shape::Tanh | Shape::Cos => 1.0,
            Shape::ClampedLinear { bound } => *bound,
            Shape::ClampedExp { cap } => *cap,
            Shape::HermiteMix { .. } => HERMITE_MIX_BOUND,
            Shape::Custom { bound, .. } => *bound,
        };
        Some(raw + self.center_shift.abs())
    }

    /// The same map with `m.a0` subtracted.
    pub fn centered(&self, m: &HermiteMoments) -> Self {
        Self { name: self.name.clone(), shape: self.shape.clone(), center_shift: self.center_shift + m.a0 }
    }

    /// The negated map `-f`.
    pub fn negated(&self) -> Self {
        let inner = self.clone();
        let bound = self.bound().unwrap_or(f64::INFINITY);
        Self {
            name: format!("neg-{}", self.name),
            shape: Shape::Custom { f: Arc::new(move |t| -inner.eval(t)), bound, kinks: self.shape.kinks() },
            center_shift: 0.0,
        }
    }
}

/// Builds a catalog nonlinearity; missing parameters take their defaults.
///
/// Parameters: `bound` (clamped-linear, default 5), `cap` (clamped-exp, default 5),
/// `r` (hermite-mix, required).
pub fn catalog(name: &str, params: &[(&str, f64)]) -> Result<Nonlinearity> {
    let allowed: &[&str] = match name {
        "tanh" | "cos" => &[],
        "clamped-linear" => &["bound"],
        "clamped-exp" => &["cap"],
        "hermite-mix" => &["r"],
        _ => {
            return Err(invalid(format!(
                "unknown nonlinearity '{name}'; expected one of {}",
                CATALOG_NAMES.join(", ")
            )))
        }
    };
    if let Some((key, _)) = params.iter().find(|(k, _)| !allowed.contains(k)) {
        return Err(invalid(format!("parameter '{key}' is not accepted by '{name}'")));
    }
    let get = |key: &str| params.iter().find(|(k, _)| *k == key).map(|&(_, v)| v);
    match name {
        "tanh" => Ok(Nonlinearity::tanh()),
        "cos" => Ok(Nonlinearity::cos()),
        "clamped-linear" => Nonlinearity::clamped_linear(get("bound").unwrap_or(5.0)),
        "clamped-exp" => Nonlinearity::clamped_exp(get("cap").unwrap_or(5.0)),
        _ => {
            let r = get("r").ok_or_else(|| invalid("hermite-mix requires parameter 'r'"))?;
            Nonlinearity::hermite_mix(r)
        }
    }
}

/// Gaussian moments of a nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HermiteMoments {
    /// `E[f(ξ)]`.
    pub a0: f64,
    /// `E[ξ f(ξ)]`, the linear component.
    pub a1: f64,
    /// `E[ξ² f(ξ)]/√2`; zero for odd maps and for cos.
    pub a2: f64,
    /// `E[(f(ξ) - a0)²]`.
    pub nu: f64,
}

/// Computes the moments of `f` with `k` nodes (`k ≥ 64`).
///
/// Maps with kinks get `k` nodes per smooth piece.
pub fn moments(f: &Nonlinearity, k: usize) -> Result<HermiteMoments> {
    if k < 64 {
        return Err(invalid(format!("moment quadrature needs at least 64 nodes, got {k}")));
    }
    moments_with(f, &rule_for(f, k)?)
}

/// The quadrature rule [`moments`] uses for `f`.
pub fn rule_for(f: &Nonlinearity, k: usize) -> Result<GaussHermite> {
    let kinks = f.shape().kinks();
    if kinks.is_empty() {
        GaussHermite::new(k)
    } else {
        GaussHermite::piecewise(&kinks, k)
    }
}

/// Computes the moments of `f` with an existing rule.
pub fn moments_with(f: &Nonlinearity, rule: &GaussHermite) -> Result<HermiteMoments> {
    let values: Vec<f64> = rule.nodes().iter().map(|&t| f.eval(t)).collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!(
            "nonlinearity '{}' is not finite at node {}",
            f.name(),
            rule.nodes()[pos]
        )));
    }
    let w = rule.weights();
    let x = rule.nodes();
    let a0: f64 = w.iter().zip(&values).map(|(w, v)| w * v).sum();
    let a1: f64 = w.iter().zip(x).zip(&values).map(|((w, x), v)| w * x * v).sum();
    let a2: f64 = w
        .iter()
        .zip(x)
        .zip(&values)
        .map(|((w, x), v)| w * x * x * v)
        .sum::<f64>()
        / std::f64::consts::SQRT_2;
    let nu: f64 = w.iter().zip(&values).map(|(w, v)| w * (v - a0) * (v - a0)).sum();
    if a2.abs() > 1e-6 {
        log::warn!(
            "nonlinearity '{}' has second Hermite coefficient {a2:.3e}; the theory assumes it vanishes",
            f.name()
        );
    }
    Ok(HermiteMoments { a0, a1, a2, nu })
}

/// Returns the map shifted so that its Gaussian mean is zero.
pub fn centered(f: &Nonlinearity, m: &HermiteMoments) -> Nonlinearity {
    f.centered(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_rejects_single_node() {
        assert!(matches!(GaussHermite::new(1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn two_node_rule_is_plus_minus_one() {
        let rule = GaussHermite::new(2).unwrap();
        assert!((rule.nodes()[1] - 1.0).abs() < 1e-15);
        assert!((rule.weights()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn catalog_rejects_unknown_names_and_params() {
        assert!(catalog("relu", &[]).is_err());
        assert!(catalog("tanh", &[("bound", 1.0)]).is_err());
        assert!(catalog("hermite-mix", &[]).is_err());
        assert!(catalog("hermite-mix", &[("r", 1.5)]).is_err());
    }

    #[test]
    fn negation_flips_sign() {
        let f = Nonlinearity::tanh();
        let g = f.negated();
        assert_eq!(g.eval(0.7), -f.eval(0.7));
    }
}
