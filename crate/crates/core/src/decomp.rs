//! Agreement/disagreement error decomposition, the discounted noise
//! accumulators ψ and χ, and empirical rate extraction.
//!
//! With `Q = I - 1'π` and a consensus target `x* = 1'y*`, the error splits as
//! `x - x* = 1'π(x - x*) + Qx`. The accumulators follow
//!
//! ```text
//! ψ_{n+1} = ψ_n e^{-α_n A} + α_n 1'π M_{n+1}
//! χ_{n+1} = W χ_n e^{-α_n A} + α_n Q M_{n+1}
//! ```
//!
//! and `Δ_n = 1'π(x_n - x*) - ψ_n`, `Γ_n = Qx_n - χ_n` are their residuals.
//! ψ is rank one, so only its π-row (a `1 x d` vector) is stored; its
//! operator norm is `√m` times the Euclidean norm of that row.

use nalgebra::{DMatrix, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::{operator_norm, DisagreementProjector, DriftMatrix, GossipMatrix, StationaryVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("x* rows differ by {spread:e}; x* must be a consensus matrix 1'y")]
    XStarNotConsensus { spread: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no records at or after burn-in {burn_in}")]
    EmptyAfterBurnIn { burn_in: u64 },
    #[error("slope fit needs at least {needed} points in window, found {found}")]
    TooFewPoints { found: usize, needed: usize },
    #[error("tau is not strictly increasing at index {index} (bound T = {bound})")]
    TauNotIncreasing { index: u64, bound: f64 },
    #[error("invalid martingale test parameters: {0}")]
    Invalid(String),
}

/// Tolerance on row spread of a consensus matrix.
pub const CONSENSUS_TOL: f64 = 1e-12;
/// Minimum number of checkpoints for a slope fit.
pub const MIN_FIT_POINTS: usize = 10;

/// One checkpoint of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompRecord {
    pub n: u64,
    pub alpha_n: f64,
    pub t_n: f64,
    /// `√(α_n ln t_{n+1})`; absent while `t_{n+1} <= 1`.
    pub lil_scale: Option<f64>,
    pub agreement: f64,
    pub disagreement: f64,
    pub total: f64,
    pub lil_ratio: Option<f64>,
    pub psi: Option<f64>,
    pub chi: Option<f64>,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
}

/// Norms of the two error components and the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompParts {
    pub agreement: f64,
    pub disagreement: f64,
    pub total: f64,
    /// `‖(x - x*) - 1'π(x - x*) - Qx‖`, zero up to rounding.
    pub identity_residual: f64,
}

/// Checks that `x_star` has identical rows.
pub fn check_consensus(x_star: &DMatrix<f64>) -> Result<(), DecompError> {
    let mut spread = 0.0_f64;
    for i in 1..x_star.nrows() {
        spread = spread.max((x_star.row(i) - x_star.row(0)).amax());
    }
    if spread > CONSENSUS_TOL {
        return Err(DecompError::XStarNotConsensus { spread });
    }
    Ok(())
}

pub fn decompose(
    x: &DMatrix<f64>,
    x_star: &DMatrix<f64>,
    pi: &StationaryVector,
    q: &DisagreementProjector,
) -> Result<DecompParts, DecompError> {
    let m = pi.len();
    if x.shape() != x_star.shape() || x.nrows() != m {
        return Err(DecompError::DimensionMismatch(format!(
            "x {:?}, x* {:?}, m = {m}",
            x.shape(),
            x_star.shape()
        )));
    }
    check_consensus(x_star)?;
    let err = x - x_star;
    let pi_err = pi.as_row() * &err;
    let agreement_mat = DMatrix::from_fn(m, x.ncols(), |_, j| pi_err[j]);
    let disagreement_mat = q.matrix() * x;
    let identity_residual = (&err - &agreement_mat - &disagreement_mat).amax();
    Ok(DecompParts {
        agreement: (m as f64).sqrt() * pi_err.norm(),
        disagreement: operator_norm(&disagreement_mat),
        total: operator_norm(&err),
        identity_residual,
    })
}

/// ψ (stored as its π-row) and χ.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseAccumulators {
    pub psi_row: RowDVector<f64>,
    pub chi: DMatrix<f64>,
}

impl NoiseAccumulators {
    pub fn zeros(m: usize, d: usize) -> Self {
        NoiseAccumulators { psi_row: RowDVector::zeros(d), chi: DMatrix::zeros(m, d) }
    }

    /// The full `m x d` matrix `ψ = 1'·psi_row`.
    pub fn psi_matrix(&self, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, self.psi_row.len(), |_, j| self.psi_row[j])
    }

    pub fn psi_norm(&self, m: usize) -> f64 {
        (m as f64).sqrt() * self.psi_row.norm()
    }

    pub fn chi_norm(&self) -> f64 {
        operator_norm(&self.chi)
    }
}

/// `psi_row ← psi_row e^{-α_n A} + α_n π M_{n+1}`.
pub fn psi_update(
    acc: &mut NoiseAccumulators,
    m_next: &DMatrix<f64>,
    pi: &StationaryVector,
    a: &DriftMatrix,
    alpha_n: f64,
) {
    let exp_neg = a.exp_neg(alpha_n);
    psi_update_with(acc, m_next, pi, &exp_neg, alpha_n);
}

/// [`psi_update`] with a precomputed `e^{-α_n A}`.
pub fn psi_update_with(
    acc: &mut NoiseAccumulators,
    m_next: &DMatrix<f64>,
    pi: &StationaryVector,
    exp_neg: &DMatrix<f64>,
    alpha_n: f64,
) {
    let pushed = &acc.psi_row * exp_neg;
    acc.psi_row = pushed + (pi.as_row() * m_next) * alpha_n;
}

/// `χ ← W χ e^{-α_n A} + α_n Q M_{n+1}`.
pub fn chi_update(
    acc: &mut NoiseAccumulators,
    m_next: &DMatrix<f64>,
    w: &GossipMatrix,
    q: &DisagreementProjector,
    a: &DriftMatrix,
    alpha_n: f64,
) {
    let exp_neg = a.exp_neg(alpha_n);
    chi_update_with(acc, m_next, w, q, &exp_neg, alpha_n);
}

pub fn chi_update_with(
    acc: &mut NoiseAccumulators,
    m_next: &DMatrix<f64>,
    w: &GossipMatrix,
    q: &DisagreementProjector,
    exp_neg: &DMatrix<f64>,
    alpha_n: f64,
) {
    let pushed = w.entries() * &acc.chi * exp_neg;
    acc.chi = pushed + (q.matrix() * m_next) * alpha_n;
}

/// Supremum of `lil_ratio` over records with `n >= burn_in`, and the first
/// index attaining it.
pub fn lil_running_sup(trace: &[DecompRecord], burn_in: u64) -> Result<(f64, u64), DecompError> {
    let mut best: Option<(f64, u64)> = None;
    for rec in trace.iter().filter(|r| r.n >= burn_in) {
        if let Some(ratio) = rec.lil_ratio {
            match best {
                Some((b, _)) if ratio <= b => {}
                _ => best = Some((ratio, rec.n)),
            }
        }
    }
    best.ok_or(DecompError::EmptyAfterBurnIn { burn_in })
}

/// Least-squares line through `(ln n, ln y)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub window: (u64, u64),
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
}

/// Fits `ln y = intercept + slope · ln n` over points with `n` in the closed
/// window. Non-positive or non-finite values are skipped.
pub fn slope_fit(points: &[(u64, f64)], window: (u64, u64)) -> Result<SlopeFit, DecompError> {
    let (lo, hi) = window;
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(n, y)| *n >= lo && *n <= hi && *n > 0 && *y > 0.0 && y.is_finite())
        .map(|&(n, y)| ((n as f64).ln(), y.ln()))
        .collect();
    if logs.len() < MIN_FIT_POINTS {
        return Err(DecompError::TooFewPoints { found: logs.len(), needed: MIN_FIT_POINTS });
    }
    let k = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mean_x).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - mean_y).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(DecompError::TooFewPoints { found: 1, needed: MIN_FIT_POINTS });
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let r_squared = if syy <= f64::EPSILON * k {
        1.0
    } else {
        ((sxy * sxy) / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(SlopeFit { window, slope, intercept, r_squared, points: logs.len() })
}

/// Linear-interpolation quantile (`p` in `[0,1]`) of an unsorted sample.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile_sorted(&sorted, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Scalar martingale-difference sources for the LIL tester.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MartingaleNoise {
    /// ±1 with equal probability.
    Rademacher,
    Gaussian { sigma: f64 },
    Zero,
}

impl MartingaleNoise {
    /// Conditional standard deviation bound `σ`.
    pub fn sigma(&self) -> f64 {
        match *self {
            MartingaleNoise::Rademacher => 1.0,
            MartingaleNoise::Gaussian { sigma } => sigma,
            MartingaleNoise::Zero => 0.0,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            MartingaleNoise::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            MartingaleNoise::Gaussian { sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                sigma * z
            }
            MartingaleNoise::Zero => 0.0,
        }
    }
}

/// Weight sequences `φ_k` with their bounds `T_k = |φ_k|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightKind {
    /// `φ_k = 1`, so `τ_n = n + 1`.
    Unit,
    /// `φ_k = (k + 1)^{-exponent}`; `τ_n → ∞` requires `exponent <= 1/2`.
    Power { exponent: f64 },
}

impl WeightKind {
    fn weight(&self, k: u64) -> f64 {
        match *self {
            WeightKind::Unit => 1.0,
            WeightKind::Power { exponent } => ((k + 1) as f64).powf(-exponent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleLilSpec {
    pub noise: MartingaleNoise,
    pub weights: WeightKind,
    pub horizon: u64,
    /// First index `n` included in the supremum.
    pub burn_in: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleLilResult {
    /// `sup |U_{n+1}| / √(2 τ_n ln ln τ_n)` over `burn_in <= n <= horizon`.
    pub sup_normalized: f64,
    pub argmax_n: u64,
    pub sigma: f64,
    /// `(n, normalized)` at geometric checkpoints (ratio 1.05) past `τ_n > e^e`.
    pub trace: Vec<(u64, f64)>,
}

impl MartingaleLilResult {
    pub fn report(&self, spec: &MartingaleLilSpec) -> String {
        let mut out = String::new();
        out.push_str(&format!("martingale LIL test (seed {})\n", spec.seed));
        out.push_str(&format!("  noise            : {:?} (sigma = {})\n", spec.noise, self.sigma));
        out.push_str(&format!("  weights          : {:?}\n", spec.weights));
        out.push_str(&format!("  window           : [{}, {}]\n", spec.burn_in, spec.horizon));
        out.push_str(&format!("  sup normalized   : {:.6} at n = {}\n", self.sup_normalized, self.argmax_n));
        out.push_str(&format!("  limsup bound     : {:.6}\n", self.sigma));
        // proof-only parameters of the underlying concentration lemma
        out.push_str("  moment order b / exponent beta: documentation only, not enforced\n");
        out
    }
}

/// Simulates `U_{n+1} = Σ_{k<=n} φ_k ε_{k+1}` and reports the supremum of
/// `|U_{n+1}| / √(2 τ_n ln ln τ_n)`, `τ_n = Σ_{k<=n} T_k²`.
pub fn martingale_lil_test(spec: &MartingaleLilSpec) -> Result<MartingaleLilResult, DecompError> {
    if spec.burn_in > spec.horizon {
        return Err(DecompError::Invalid(format!("burn_in {} > horizon {}", spec.burn_in, spec.horizon)));
    }
    if let WeightKind::Power { exponent } = spec.weights {
        if !(exponent.is_finite() && exponent <= 0.5) {
            return Err(DecompError::Invalid(format!("power exponent {exponent} makes tau summable")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut u = 0.0_f64;
    let mut tau = 0.0_f64;
    let mut best: Option<(f64, u64)> = None;
    let mut trace = Vec::new();
    let mut next_mark = 1u64;
    let threshold = std::f64::consts::E.exp();
    for n in 0..=spec.horizon {
        let phi = spec.weights.weight(n);
        let bound = phi.abs();
        if !bound.is_finite() || bound <= 0.0 {
            return Err(DecompError::TauNotIncreasing { index: n, bound });
        }
        u += phi * spec.noise.draw(&mut rng);
        tau += bound * bound;
        if tau <= threshold {
            continue;
        }
        let normalized = u.abs() / (2.0 * tau * tau.ln().ln()).sqrt();
        if n >= spec.burn_in {
            match best {
                Some((b, _)) if normalized <= b => {}
                _ => best = Some((normalized, n)),
            }
        }
        if n >= next_mark || n == spec.horizon {
            trace.push((n, normalized));
            next_mark = ((n as f64) * 1.05).ceil().max((n + 1) as f64) as u64;
        }
    }
    let (sup_normalized, argmax_n) = best.ok_or(DecompError::EmptyAfterBurnIn { burn_in: spec.burn_in })?;
    Ok(MartingaleLilResult { sup_normalized, argmax_n, sigma: spec.noise.sigma(), trace })
}
