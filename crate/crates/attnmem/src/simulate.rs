//! Monte Carlo ground truth for the memorization error.
//!
//! Samples the binary signal-plus-noise model `X = μyᵀ + Z`, builds nonlinear
//! attention kernels `K = f(G/√p)/√p` with `G = XᵀX + (Xᵀw_K)(w_QᵀX)`, and
//! measures the training error of the ridge-regularized linear probe on `XK`.
//! Diagnostics compare the kernel with its linearization and the resolvent
//! traces with the fixed-point predictions.
//!
//! Every random quantity derives from a 64-bit seed through [`mix64`] and a
//! ChaCha8 stream, so results are reproducible within one build.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::nonlinearity::{moments, Nonlinearity, DEFAULT_NODES};
use crate::selfconsistent::{solve, NoiseSystemParams, SolverOptions};
use crate::theory::{sigma_k, AlignmentMode, SignalAlignment};

/// Condition estimate above which a solve is flagged.
pub const CONDITION_WARNING: f64 = 1e12;
/// Max-norm defect of `M (Q y) - y` above which a solve is flagged.
pub const RESOLVENT_TOLERANCE: f64 = 1e-8;
/// Iteration budget of [`spectral_norm`].
pub const POWER_ITERATIONS: usize = 50;
/// Relative tolerance of [`spectral_norm`].
pub const POWER_TOLERANCE: f64 = 1e-6;
/// Default cap of the truncated exponential inside [`softmax_kernel`].
pub const DEFAULT_SOFTMAX_CAP: f64 = 5.0;

/// Derives the seed of stream `index` from `master` (SplitMix64 step and finalizer).
pub fn mix64(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussian_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// One draw of the binary signal-plus-noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `p × n` data matrix `μyᵀ + Z`.
    pub x: DMatrix<f64>,
    /// Labels in `{-1, +1}`.
    pub y: DVector<f64>,
    /// Class mean `μ`.
    pub mu: DVector<f64>,
    /// Seed the draw was generated from.
    pub seed: u64,
}

impl Dataset {
    /// Number of tokens.
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Ambient dimension.
    pub fn p(&self) -> usize {
        self.x.nrows()
    }

    /// `c = p/n`.
    pub fn ratio(&self) -> f64 {
        self.p() as f64 / self.n() as f64
    }

    /// The noise `Z = X - μyᵀ`.
    pub fn noise(&self) -> DMatrix<f64> {
        let mut z = self.x.clone();
        z.ger(-1.0, &self.mu, &self.y, 1.0);
        z
    }

    /// The same tokens in the order `perm`, where column `j` of the result is column `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n();
        let mut seen = vec![false; n];
        for &i in perm {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(invalid("not a permutation of the token indices"));
            }
        }
        if perm.len() != n {
            return Err(invalid("permutation length differs from n"));
        }
        Ok(Self {
            x: DMatrix::from_fn(self.p(), n, |r, j| self.x[(r, perm[j])]),
            y: DVector::from_fn(n, |j, _| self.y[perm[j]]),
            mu: self.mu.clone(),
            seed: self.seed,
        })
    }
}

/// Draws `n` tokens in dimension `p = mu.len()` with uniform ±1 labels.
///
/// Labels are drawn first, then `Z` column by column.
pub fn sample_dataset(n: usize, p: usize, mu: &DVector<f64>, seed: u64) -> Result<Dataset> {
    if n < 2 || p < 2 {
        return Err(invalid(format!("need n, p >= 2, got n={n}, p={p}")));
    }
    if mu.len() != p {
        return Err(invalid(format!("mu has length {}, expected p={p}", mu.len())));
    }
    if mu.iter().any(|v| !v.is_finite()) {
        return Err(invalid("mu must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DVector::from_fn(n, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
    let mut x = DMatrix::from_fn(p, n, |_, _| 0.0);
    for v in x.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    x.ger(1.0, mu, &y, 1.0);
    Ok(Dataset { x, y, mu: mu.clone(), seed })
}

/// Rank-one key and query directions `w_K`, `w_Q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_k: DVector<f64>,
    pub w_q: DVector<f64>,
}

impl AttentionWeights {
    /// Checks that both vectors are finite and of equal length.
    pub fn new(w_k: DVector<f64>, w_q: DVector<f64>) -> Result<Self> {
        if w_k.len() != w_q.len() {
            return Err(invalid(format!("w_k has length {}, w_q has length {}", w_k.len(), w_q.len())));
        }
        if w_k.iter().chain(w_q.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("attention weights must be finite"));
        }
        Ok(Self { w_k, w_q })
    }

    /// `w_K = w_Q = 0` in dimension `p`.
    pub fn zeros(p: usize) -> Self {
        Self { w_k: DVector::zeros(p), w_q: DVector::zeros(p) }
    }

    /// `(‖w_K‖, ‖w_Q‖)`.
    pub fn norms(&self) -> (f64, f64) {
        (self.w_k.norm(), self.w_q.norm())
    }

    fn check_dim(&self, p: usize) -> Result<()> {
        if self.w_k.len() != p {
            return Err(invalid(format!("attention weights have length {}, data has p={p}", self.w_k.len())));
        }
        Ok(())
    }
}

/// Draws `μ`, `w_K`, `w_Q` for `mode` with `‖μ‖² = snr`.
///
/// A Gaussian direction `μ_base` is normalized and scaled; orthogonal weights
/// come from Gram–Schmidt on two further Gaussian draws, so the inner products
/// equal those of [`AlignmentMode::alignment`] up to rounding.
pub fn signal_vectors(
    mode: AlignmentMode,
    snr: f64,
    p: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(DVector<f64>, AttentionWeights)> {
    if !(snr >= 0.0 && snr.is_finite()) {
        return Err(invalid(format!("snr must be non-negative and finite, got {snr}")));
    }
    if p < 3 {
        return Err(invalid(format!("signal construction needs p >= 3, got {p}")));
    }
    if mode == AlignmentMode::Null {
        return Ok((DVector::zeros(p), AttentionWeights::zeros(p)));
    }
    let u = gaussian_vector(p, rng).normalize();
    let mu = &u * snr.sqrt();
    let weights = match mode {
        AlignmentMode::Null | AlignmentMode::SignalOnly => AttentionWeights::zeros(p),
        AlignmentMode::Aligned => AttentionWeights { w_k: mu.clone(), w_q: mu.clone() },
        AlignmentMode::AlignedUnit => AttentionWeights { w_k: u.clone(), w_q: u.clone() },
        AlignmentMode::Orthogonal => {
            let mut e1 = gaussian_vector(p, rng);
            e1.axpy(-u.dot(&e1), &u, 1.0);
            e1.normalize_mut();
            let mut e2 = gaussian_vector(p, rng);
            e2.axpy(-u.dot(&e2), &u, 1.0);
            e2.axpy(-e1.dot(&e2), &e1, 1.0);
            e2.normalize_mut();
            AttentionWeights { w_k: e1, w_q: e2 }
        }
    };
    Ok((mu, weights))
}

/// Inner products of concrete vectors.
pub fn alignment_of(mu: &DVector<f64>, w: &AttentionWeights) -> Result<SignalAlignment> {
    SignalAlignment::new(
        mu.norm_squared(),
        mu.dot(&w.w_k),
        mu.dot(&w.w_q),
        w.w_k.norm_squared(),
        w.w_q.norm_squared(),
        w.w_k.dot(&w.w_q),
    )
}

/// How the kernel was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    /// `f(G/√p)/√p` entrywise.
    Entrywise,
    /// Column-normalized truncated exponential.
    Softmax,
}

/// Where the centering constant of `f` is subtracted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CenteringPlacement {
    /// Every entry, diagonal included.
    #[default]
    AllEntries,
    /// Off-diagonal entries only; the diagonal keeps the raw map.
    OffDiagonalOnly,
}

/// An `n × n` attention kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub k: DMatrix<f64>,
    pub kind: KernelKind,
    pub f_name: String,
    /// Constant subtracted from the raw map.
    pub center_shift: f64,
}

/// `G/√p` with `G = XᵀX + (Xᵀw_K)(w_QᵀX)`, never forming `I + w_K w_Qᵀ`.
pub fn attention_scores(ds: &Dataset, w: &AttentionWeights) -> Result<DMatrix<f64>> {
    w.check_dim(ds.p())?;
    let xt = ds.x.transpose();
    let mut g = &xt * &ds.x;
    let a = &xt * &w.w_k;
    let b = &xt * &w.w_q;
    g.ger(1.0, &a, &b, 1.0);
    g /= (ds.p() as f64).sqrt();
    Ok(g)
}

fn check_kernel(k: &DMatrix<f64>, what: &str) -> Result<()> {
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain(format!("{what} kernel has non-finite entries")));
    }
    Ok(())
}

/// `K = f(G/√p)/√p` entrywise, diagonal included.
///
/// `f` is expected to be centered already.
pub fn attention_kernel(ds: &Dataset, w: &AttentionWeights, f: &Nonlinearity) -> Result<KernelMatrix> {
    attention_kernel_with(ds, w, f, CenteringPlacement::AllEntries)
}

/// [`attention_kernel`] with an explicit centering placement.
pub fn attention_kernel_with(
    ds: &Dataset,
    w: &AttentionWeights,
    f: &Nonlinearity,
    placement: CenteringPlacement,
) -> Result<KernelMatrix> {
    let scale = 1.0 / (ds.p() as f64).sqrt();
    let mut k = attention_scores(ds, w)?;
    k.apply(|t| *t = f.eval(*t) * scale);
    if placement == CenteringPlacement::OffDiagonalOnly {
        for i in 0..k.nrows() {
            k[(i, i)] += f.center_shift() * scale;
        }
    }
    check_kernel(&k, "attention")?;
    Ok(KernelMatrix { k, kind: KernelKind::Entrywise, f_name: f.name().to_string(), center_shift: f.center_shift() })
}

/// Column-normalized `min(exp(G/√p), cap)`.
pub fn softmax_kernel(ds: &Dataset, w: &AttentionWeights, cap: f64) -> Result<KernelMatrix> {
    if !(cap > 0.0 && cap.is_finite()) {
        return Err(invalid(format!("softmax cap must be positive and finite, got {cap}")));
    }
    let mut k = attention_scores(ds, w)?;
    k.apply(|t| *t = t.exp().min(cap));
    for mut col in k.column_iter_mut() {
        let s: f64 = col.sum();
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::NumericDomain(format!("softmax column sum is {s}")));
        }
        col /= s;
    }
    check_kernel(&k, "softmax")?;
    Ok(KernelMatrix { k, kind: KernelKind::Softmax, f_name: "softmax".into(), center_shift: 0.0 })
}

/// Memorization error of one probe solve with its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalError {
    /// `(γ²/n) yᵀ Q² y`.
    pub e: f64,
    /// Condition estimate of `M = FᵀF/n + γI` from its Cholesky factor.
    pub condition: f64,
    /// `‖M (Q y) - y‖_∞ / ‖y‖_∞`.
    pub resolvent_residual: f64,
    /// Set when the condition estimate or the residual exceeds its threshold.
    pub warning: Option<String>,
}

fn spd_factor(m: DMatrix<f64>, what: &str) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let chol = Cholesky::new(m).ok_or_else(|| Error::SolverBreakdown {
        context: format!("{what} is not numerically positive definite"),
        condition: f64::INFINITY,
    })?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    Ok((chol, (hi / lo).powi(2)))
}

/// Error of the ridge probe on features `F` (`d × n`) through the `n × n` resolvent.
pub fn probe_error(features: &DMatrix<f64>, y: &DVector<f64>, gamma: f64) -> Result<EmpiricalError> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive and finite, got {gamma}")));
    }
    let n = features.ncols();
    if y.len() != n {
        return Err(invalid(format!("labels have length {}, features have {n} columns", y.len())));
    }
    let ft = features.transpose();
    let mut m = &ft * features;
    m /= n as f64;
    m = m.symmetrize_with_diag(gamma);
    let (chol, condition) = spd_factor(m.clone(), "the probe Gram matrix")?;
    let qy = chol.solve(y);
    let defect = &m * &qy - y;
    let resolvent_residual = defect.amax() / y.amax().max(f64::MIN_POSITIVE);
    let e = gamma * gamma * qy.norm_squared() / n as f64;
    if !e.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite empirical error at gamma={gamma}")));
    }
    let warning = if condition > CONDITION_WARNING || resolvent_residual > RESOLVENT_TOLERANCE {
        let msg = format!(
            "probe solve at gamma={gamma:e}: condition {condition:.3e}, resolvent residual {resolvent_residual:.3e}"
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(EmpiricalError { e, condition, resolvent_residual, warning })
}

trait SymmetrizeWithDiag {
    fn symmetrize_with_diag(self, gamma: f64) -> Self;
}

impl SymmetrizeWithDiag for DMatrix<f64> {
    fn symmetrize_with_diag(self, gamma: f64) -> Self {
        let n = self.nrows();
        DMatrix::from_fn(n, n, |i, j| {
            let v = 0.5 * (self[(i, j)] + self[(j, i)]);
            if i == j {
                v + gamma
            } else {
                v
            }
        })
    }
}

/// Memorization error of the probe on the attention output `XK`.
pub fn empirical_error(ds: &Dataset, k: &KernelMatrix, gamma: f64) -> Result<EmpiricalError> {
    if k.k.nrows() != ds.n() || k.k.ncols() != ds.n() {
        return Err(invalid("kernel size differs from the number of tokens"));
    }
    probe_error(&(&ds.x * &k.k), &ds.y, gamma)
}

/// Error of the explicit probe `w* = (AAᵀ + nγI_p)⁻¹ A y` with `A = XK`, as `(1/n)‖y - Aᵀw*‖²`.
///
/// Solves in dimension `p`, independently of [`empirical_error`].
pub fn direct_probe_error(ds: &Dataset, k: &KernelMatrix, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive and finite, got {gamma}")));
    }
    let n = ds.n() as f64;
    let a = &ds.x * &k.k;
    let gram = (&a * a.transpose()).symmetrize_with_diag(n * gamma);
    let (chol, _) = spd_factor(gram, "the direct probe system")?;
    let w = chol.solve(&(&a * &ds.y));
    let r = &ds.y - a.transpose() * w;
    Ok(r.norm_squared() / n)
}

/// Memorization error of the ridge probe on raw tokens, `(γ²/n) yᵀ(XᵀX/n + γI)⁻² y`.
pub fn ridge_empirical(ds: &Dataset, gamma: f64) -> Result<EmpiricalError> {
    probe_error(&ds.x, &ds.y, gamma)
}

/// Largest singular value by power iteration on `AᵀA`.
///
/// Runs at most [`POWER_ITERATIONS`] steps and stops once the estimate moves by
/// less than [`POWER_TOLERANCE`] relative.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |i, _| 1.0 + ((i * 7919) % 13) as f64 / 13.0).normalize();
    let mut sigma = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let av = a * &v;
        let next = av.norm();
        if next == 0.0 {
            return 0.0;
        }
        let w = a.tr_mul(&av);
        let wn = w.norm();
        if wn == 0.0 {
            return next;
        }
        v = w / wn;
        let done = (next - sigma).abs() <= POWER_TOLERANCE * next;
        sigma = next;
        if done {
            break;
        }
    }
    (a * &v).norm().max(sigma)
}

/// Distance between the kernel and its low-rank linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationReport {
    /// `‖K_X - K̃_X‖` in spectral norm.
    pub residual: f64,
    /// `‖K_N‖`.
    pub kn_norm: f64,
    /// `‖U_K‖`.
    pub uk_norm: f64,
    /// `‖V_Q‖`.
    pub vq_norm: f64,
    /// `‖Σ_K‖`.
    pub sigmak_norm: f64,
    pub n: usize,
    pub p: usize,
}

fn apply_kernel_map(g: &DMatrix<f64>, f: &Nonlinearity, p: usize) -> DMatrix<f64> {
    let sp = (p as f64).sqrt();
    g.map(|t| f.eval(t / sp) / sp)
}

fn tall_norm(u: &DMatrix<f64>) -> f64 {
    let gram = u.transpose() * u;
    SymmetricEigen::new(gram).eigenvalues.max().max(0.0).sqrt()
}

/// Builds `K̃_X = K_N + U_K Σ_K V_Qᵀ` and measures its distance to `K_X`.
///
/// `f` is expected to be centered. `K_N = f(ZᵀZ/√p)/√p` with its diagonal zeroed,
/// `U_K = [y, Zᵀμ, Zᵀw_K]/√p` and `V_Q = [y, Zᵀμ, Zᵀw_Q]/√p`.
pub fn linearization_parts(ds: &Dataset, w: &AttentionWeights, f: &Nonlinearity) -> Result<LinearizationReport> {
    w.check_dim(ds.p())?;
    let (n, p) = (ds.n(), ds.p());
    let a1 = moments(f, DEFAULT_NODES)?.a1;
    let align = alignment_of(&ds.mu, w)?;
    let sp = (p as f64).sqrt();

    let xt = ds.x.transpose();
    let xtx = &xt * &ds.x;
    let project = |v: &DVector<f64>| -> DVector<f64> {
        // Zᵀv = Xᵀv - y μᵀv.
        let mut out = &xt * v;
        out.axpy(-ds.mu.dot(v), &ds.y, 1.0);
        out
    };
    let z_mu = project(&ds.mu);
    let z_wk = project(&w.w_k);
    let z_wq = project(&w.w_q);

    let mut g = xtx.clone();
    g.ger(1.0, &(&xt * &w.w_k), &(&xt * &w.w_q), 1.0);
    let kx = apply_kernel_map(&g, f, p);

    // ZᵀZ = XᵀX - (Xᵀμ)yᵀ - y(Xᵀμ)ᵀ + ‖μ‖² yyᵀ.
    let xmu = &xt * &ds.mu;
    let mut ztz = xtx;
    ztz.ger(-1.0, &xmu, &ds.y, 1.0);
    ztz.ger(-1.0, &ds.y, &xmu, 1.0);
    ztz.ger(align.mu2, &ds.y, &ds.y, 1.0);
    let mut kn = apply_kernel_map(&ztz, f, p);
    kn.fill_diagonal(0.0);

    let uk = DMatrix::from_columns(&[ds.y.clone(), z_mu.clone(), z_wk]) / sp;
    let vq = DMatrix::from_columns(&[ds.y.clone(), z_mu, z_wq]) / sp;
    let sk = sigma_k(&align, a1);
    let sk_dyn = DMatrix::from_iterator(3, 3, sk.iter().copied());

    let diff = kx - &kn - &uk * sk_dyn * vq.transpose();
    let report = LinearizationReport {
        residual: spectral_norm(&diff),
        kn_norm: spectral_norm(&kn),
        uk_norm: tall_norm(&uk),
        vq_norm: tall_norm(&vq),
        sigmak_norm: sk.singular_values().max(),
        n,
        p,
    };
    let all = [report.residual, report.kn_norm, report.uk_norm, report.vq_norm, report.sigmak_norm];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("linearization norms are not finite".into()));
    }
    Ok(report)
}

/// Normalized resolvent traces of one noise-only draw next to their predictions.
///
/// Index 0 holds `m`, indices 1 to 7 hold `δ1..δ7`.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceDiagnostics {
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub seed: u64,
    pub empirical: [f64; 8],
    pub predicted: [f64; 8],
    /// `|tr(Q₀ K_N Ž K_N) - (n - (γ/c) tr Q₀)| / n`.
    pub identity_gap: f64,
}

impl TraceDiagnostics {
    /// Names of the eight entries.
    pub const NAMES: [&'static str; 8] = ["m", "delta1", "delta2", "delta3", "delta4", "delta5", "delta6", "delta7"];

    /// `|empirical - predicted| / |predicted|` per entry.
    pub fn relative_errors(&self) -> [f64; 8] {
        std::array::from_fn(|i| (self.empirical[i] - self.predicted[i]).abs() / self.predicted[i].abs())
    }
}

fn frobenius_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Empirical `m, δ1..δ7` of a noise-only draw and their fixed-point predictions.
///
/// `f` is centered internally. With `Ž = ZᵀZ/p`, `K = K_N` and
/// `Q₀ = (K Ž K + (γ/c) I)⁻¹`, the entries are `tr Q₀/n` followed by `(1/p)` times
/// the traces of `Q₀K`, `Q₀KŽ`, `KQ₀K`, `ŽKQ₀KŽ`, `Q₀Ž`, `ŽKQ₀Ž`, `ŽKQ₀KŽŽ`.
pub fn trace_diagnostics(n: usize, p: usize, f: &Nonlinearity, gamma: f64, seed: u64) -> Result<TraceDiagnostics> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive and finite, got {gamma}")));
    }
    let mo = moments(f, DEFAULT_NODES)?;
    let fc = f.centered(&mo);
    let c = p as f64 / n as f64;
    let params = NoiseSystemParams::from_moments(c, gamma, &mo)?;
    let state = solve(&params, &SolverOptions::default())?;
    let mut predicted = [0.0; 8];
    predicted[0] = state.m;
    predicted[1..].copy_from_slice(&state.delta);

    let ds = sample_dataset(n, p, &DVector::zeros(p), seed)?;
    let ztz = ds.x.transpose() * &ds.x;
    let zh = &ztz / p as f64;
    let mut k = apply_kernel_map(&ztz, &fc, p);
    k.fill_diagonal(0.0);
    let b = &k * &zh;
    let kzk = &b * &k;
    let (chol, condition) = spd_factor(kzk.clone().symmetrize_with_diag(gamma / c), "K Ž K + (γ/c) I")?;
    if condition > CONDITION_WARNING {
        log::warn!("trace resolvent condition estimate {condition:.3e}");
    }
    let q0 = chol.inverse();

    let qk = &q0 * &k;
    let qb = &q0 * &b;
    let qz = &q0 * &zh;
    let qbz = &qb * &zh;
    let pf = p as f64;
    let tr_q = q0.trace();
    let empirical = [
        tr_q / n as f64,
        qk.trace() / pf,
        qb.trace() / pf,
        frobenius_dot(&qk, &k) / pf,
        frobenius_dot(&qb, &b) / pf,
        qz.trace() / pf,
        frobenius_dot(&qz, &b) / pf,
        frobenius_dot(&qbz, &b) / pf,
    ];
    if empirical.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("non-finite resolvent trace".into()));
    }
    let identity_gap = (frobenius_dot(&q0, &kzk) - (n as f64 - gamma / c * tr_q)).abs() / n as f64;
    Ok(TraceDiagnostics { n, p, gamma, seed, empirical, predicted, identity_gap })
}

/// Which probe features a Monte Carlo cell uses.
#[derive(Debug, Clone)]
pub enum KernelModel {
    /// Entrywise attention with a centered map.
    Attention(Nonlinearity),
    /// Column softmax of the truncated exponential.
    Softmax { cap: f64 },
    /// Raw tokens, the ridge baseline.
    Ridge,
}

impl KernelModel {
    /// Entrywise attention with `f` centered by its Gaussian mean.
    pub fn attention(f: &Nonlinearity) -> Result<Self> {
        let mo = moments(f, DEFAULT_NODES)?;
        Ok(Self::Attention(f.centered(&mo)))
    }
}

/// One parameter cell of a Monte Carlo experiment.
#[derive(Debug, Clone)]
pub struct ExperimentCell {
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub snr: f64,
    pub mode: AlignmentMode,
    pub model: KernelModel,
}

impl ExperimentCell {
    /// Checks sizes and scalars.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 3 {
            return Err(invalid(format!("need n >= 2 and p >= 3, got n={}, p={}", self.n, self.p)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(invalid(format!("gamma must be positive and finite, got {}", self.gamma)));
        }
        if !(self.snr >= 0.0 && self.snr.is_finite()) {
            return Err(invalid(format!("snr must be non-negative and finite, got {}", self.snr)));
        }
        if let KernelModel::Softmax { cap } = self.model {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(invalid(format!("softmax cap must be positive and finite, got {cap}")));
            }
        }
        Ok(())
    }

    /// Signal vectors and dataset of the trial seeded by `seed`.
    ///
    /// The vectors use the stream `mix64(seed, 0)`, the dataset uses `seed` itself.
    pub fn sample(&self, seed: u64) -> Result<(Dataset, AttentionWeights)> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0));
        let (mu, w) = signal_vectors(self.mode, self.snr, self.p, &mut rng)?;
        Ok((sample_dataset(self.n, self.p, &mu, seed)?, w))
    }

    /// Empirical error of one trial.
    pub fn run_trial(&self, seed: u64) -> Result<f64> {
        let (ds, w) = self.sample(seed)?;
        let out = match &self.model {
            KernelModel::Attention(f) => empirical_error(&ds, &attention_kernel(&ds, &w, f)?, self.gamma)?,
            KernelModel::Softmax { cap } => empirical_error(&ds, &softmax_kernel(&ds, &w, *cap)?, self.gamma)?,
            KernelModel::Ridge => ridge_empirical(&ds, self.gamma)?,
        };
        Ok(out.e)
    }
}

/// Aggregate of independent trials.
#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSummary {
    pub mean_e: f64,
    /// Sample standard deviation; zero for a single trial.
    pub std_e: f64,
    /// `std_e / √trials`.
    pub stderr: f64,
    /// Number of successful trials.
    pub trials: usize,
    /// `(seed, E)` of each successful trial, in trial order.
    pub per_trial: Vec<(u64, f64)>,
    /// `(seed, message)` of each failed trial, in trial order.
    pub failures: Vec<(u64, String)>,
}

impl MonteCarloSummary {
    /// Summarizes `(seed, E)` pairs.
    pub fn from_values(per_trial: Vec<(u64, f64)>, failures: Vec<(u64, String)>) -> Result<Self> {
        let k = per_trial.len();
        if k == 0 {
            return Err(invalid("a summary needs at least one successful trial"));
        }
        let mean_e = per_trial.iter().map(|&(_, e)| e).sum::<f64>() / k as f64;
        let std_e = if k > 1 {
            let ss: f64 = per_trial.iter().map(|&(_, e)| (e - mean_e) * (e - mean_e)).sum();
            (ss / (k - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean_e, std_e, stderr: std_e / (k as f64).sqrt(), trials: k, per_trial, failures })
    }
}

/// Runs `trials` independent trials of `cell` in parallel.
///
/// Trial `t` is seeded by `mix64(master_seed, t)`; the summary does not depend on
/// scheduling. Failed trials are recorded and excluded; if every trial fails the
/// first failure is returned.
pub fn monte_carlo(cell: &ExperimentCell, trials: usize, master_seed: u64) -> Result<MonteCarloSummary> {
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    cell.validate()?;
    let outcomes: Vec<(u64, Result<f64>)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let seed = mix64(master_seed, t);
            (seed, cell.run_trial(seed))
        })
        .collect();
    let mut ok = Vec::with_capacity(trials);
    let mut failures = Vec::new();
    let mut first_error = None;
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(e) => ok.push((seed, e)),
            Err(err) => {
                log::warn!("trial with seed {seed} failed: {err}");
                failures.push((seed, err.to_string()));
                first_error.get_or_insert(err);
            }
        }
    }
    match first_error {
        Some(err) if ok.is_empty() => Err(err),
        _ => MonteCarloSummary::from_values(ok, failures),
    }
}
