//! The distributed stochastic approximation iteration
//! `x_{n+1} = W x_n + α_n [h(x_n) + M_{n+1}]` with pluggable drive and noise,
//! and the recorder that turns a run into a [`RateTrace`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, RowDVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomp::{decompose, DecompError, DecompRecord, NoiseAccumulators};
use crate::schedule::{lil_scale_from, ScheduleError, StepsizeSchedule};
use crate::spectral::{
    operator_norm, projector, stationary_vector, DisagreementProjector, DriftMatrix, GossipMatrix, SpectralError,
    StationaryVector,
};
use crate::td::TdSampler;

/// Runs abort once `‖x‖_F` exceeds this.
pub const DIVERGENCE_BOUND: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("iterate became non-finite or exceeded {DIVERGENCE_BOUND:e} at step {k}")]
    NonFinite { k: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("drift matrix A is singular")]
    SingularA,
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
}

pub type Perturbation = Arc<dyn Fn(&DMatrix<f64>) -> DMatrix<f64> + Send + Sync>;

/// Linear drive plus structured perturbation
/// `h(x) = -1'π(x - x*)A + 1'π f1(x) + Q(B + f2(x))`.
#[derive(Clone)]
pub struct PerturbedDrive {
    pub a: DriftMatrix,
    pub b: DMatrix<f64>,
    pub pi: StationaryVector,
    pub q: DisagreementProjector,
    pub x_star: DMatrix<f64>,
    pub f1: Option<Perturbation>,
    pub f2: Option<Perturbation>,
    /// Nonlinearity order of `f1` (metadata, `> 1`).
    pub order: f64,
}

impl fmt::Debug for PerturbedDrive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbedDrive")
            .field("a", &self.a)
            .field("b", &self.b)
            .field("pi", &self.pi)
            .field("x_star", &self.x_star)
            .field("f1", &self.f1.as_ref().map(|_| "<fn>"))
            .field("f2", &self.f2.as_ref().map(|_| "<fn>"))
            .field("order", &self.order)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum DriveSpec {
    /// `h(x) = B - xA`.
    Linear { a: DriftMatrix, b: DMatrix<f64> },
    LinearPlusPerturbation(Box<PerturbedDrive>),
}

impl DriveSpec {
    pub fn linear(a: DriftMatrix, b: DMatrix<f64>) -> Result<Self, EngineError> {
        if b.ncols() != a.d() || b.nrows() == 0 {
            return Err(EngineError::DimensionMismatch(format!("B is {:?}, A is {}x{}", b.shape(), a.d(), a.d())));
        }
        Ok(DriveSpec::Linear { a, b })
    }

    pub fn m(&self) -> usize {
        self.b().nrows()
    }

    pub fn d(&self) -> usize {
        self.drift().d()
    }

    pub fn drift(&self) -> &DriftMatrix {
        match self {
            DriveSpec::Linear { a, .. } => a,
            DriveSpec::LinearPlusPerturbation(p) => &p.a,
        }
    }

    pub fn b(&self) -> &DMatrix<f64> {
        match self {
            DriveSpec::Linear { b, .. } => b,
            DriveSpec::LinearPlusPerturbation(p) => &p.b,
        }
    }

    pub fn eval(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            DriveSpec::Linear { a, b } => b - x * a.matrix(),
            DriveSpec::LinearPlusPerturbation(p) => {
                let m = x.nrows();
                let mut agree_row: RowDVector<f64> = -(p.pi.as_row() * (x - &p.x_star) * p.a.matrix());
                if let Some(f1) = &p.f1 {
                    agree_row += p.pi.as_row() * f1(x);
                }
                let mut inner = p.b.clone();
                if let Some(f2) = &p.f2 {
                    inner += f2(x);
                }
                let agree = DMatrix::from_fn(m, x.ncols(), |_, j| agree_row[j]);
                agree + p.q.matrix() * inner
            }
        }
    }

    /// `x* = 1'θ*`, `θ* = πBA⁻¹` for the linear drive; the stored `x*` otherwise.
    pub fn x_star(&self, pi: &StationaryVector) -> Result<DMatrix<f64>, EngineError> {
        match self {
            DriveSpec::Linear { a, b } => {
                if pi.len() != b.nrows() {
                    return Err(EngineError::DimensionMismatch(format!("π has {} entries, B has {} rows", pi.len(), b.nrows())));
                }
                let target = pi.as_row() * b;
                let theta = a.matrix().transpose().lu().solve(&target.transpose()).ok_or(EngineError::SingularA)?;
                if theta.iter().any(|v| !v.is_finite()) {
                    return Err(EngineError::SingularA);
                }
                Ok(DMatrix::from_fn(b.nrows(), b.ncols(), |_, j| theta[j]))
            }
            DriveSpec::LinearPlusPerturbation(p) => Ok(p.x_star.clone()),
        }
    }
}

/// Martingale-difference noise `M_{n+1}`.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    Zero,
    /// Independent centred Gaussian entries, standard deviation `std[i]` for agent `i`.
    Gaussian { std: Vec<f64> },
    TdSampling(Arc<TdSampler>),
}

impl NoiseModel {
    pub fn sample(&self, x: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match self {
            NoiseModel::Zero => DMatrix::zeros(x.nrows(), x.ncols()),
            NoiseModel::Gaussian { std } => DMatrix::from_fn(x.nrows(), x.ncols(), |i, _| {
                let z: f64 = StandardNormal.sample(rng);
                std[i] * z
            }),
            NoiseModel::TdSampling(sampler) => sampler.noise(x, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsaState {
    pub k: u64,
    pub x: DMatrix<f64>,
    pub rng: ChaCha8Rng,
}

impl DsaState {
    pub fn new(x: DMatrix<f64>, seed: u64) -> Self {
        DsaState { k: 0, x, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// What a single step consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub alpha: f64,
    pub noise: DMatrix<f64>,
}

fn check_dims(x: &DMatrix<f64>, w: &GossipMatrix, h: &DriveSpec) -> Result<(), EngineError> {
    if x.nrows() != w.m() || x.nrows() != h.m() || x.ncols() != h.d() {
        return Err(EngineError::DimensionMismatch(format!(
            "x is {:?}, W is {m}x{m}, drive is {}x{}",
            x.shape(),
            h.m(),
            h.d(),
            m = w.m()
        )));
    }
    Ok(())
}

/// One iteration at step `state.k`, using `α = s.alpha_at_step(k)`.
pub fn dsa_step(
    state: &mut DsaState,
    w: &GossipMatrix,
    h: &DriveSpec,
    noise: &NoiseModel,
    s: &StepsizeSchedule,
) -> Result<StepInfo, EngineError> {
    let alpha = s.alpha_at_step(state.k);
    let m_next = noise.sample(&state.x, &mut state.rng);
    let mut next = w.entries() * &state.x;
    next += (h.eval(&state.x) + &m_next) * alpha;
    state.k += 1;
    let norm = next.norm();
    if !norm.is_finite() || norm > DIVERGENCE_BOUND {
        return Err(EngineError::NonFinite { k: state.k });
    }
    state.x = next;
    Ok(StepInfo { alpha, noise: m_next })
}

/// Recording policy for [`run_dsa`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecorderSpec {
    pub ratio: f64,
    pub dense_below: u64,
    pub psi: bool,
    pub chi: bool,
    pub delta: bool,
    pub gamma: bool,
    /// Per-decade means of `(πM)'(πM)`.
    pub covariance: bool,
    /// First index counted by LIL suprema; default: first `n >= 100` with `t_{n+1} > e`.
    pub burn_in: Option<u64>,
}

impl Default for RecorderSpec {
    fn default() -> Self {
        RecorderSpec {
            ratio: 1.05,
            dense_below: 100,
            psi: false,
            chi: false,
            delta: false,
            gamma: false,
            covariance: false,
            burn_in: None,
        }
    }
}

/// Checkpoint indices: every `n < dense_below`, then `n ← ⌈ρn⌉`, always ending at `horizon`.
pub fn checkpoints(horizon: u64, ratio: f64, dense_below: u64) -> Vec<u64> {
    let ratio = ratio.max(1.0 + 1e-9);
    let mut out: Vec<u64> = (0..dense_below.min(horizon + 1)).collect();
    let mut n = dense_below.max(1);
    while n <= horizon {
        if out.last() != Some(&n) {
            out.push(n);
        }
        n = ((n as f64 * ratio).ceil() as u64).max(n + 1);
    }
    if out.last() != Some(&horizon) {
        out.push(horizon);
    }
    out
}

/// Default burn-in: first `n >= 100` with `t_{n+1} > e`, capped at `horizon`.
pub fn default_burn_in(s: &StepsizeSchedule, horizon: u64) -> u64 {
    let mut t = 0.0;
    for n in 0..=horizon {
        t += s.alpha_at_step(n);
        if n >= 100 && t > std::f64::consts::E {
            return n;
        }
    }
    horizon
}

/// Mean of `(πM)'(πM)` over the steps `n` of one decade `[10^k, 10^{k+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceDecade {
    pub decade: u32,
    pub count: u64,
    pub mean: Vec<Vec<f64>>,
}

/// A recorded run.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTrace {
    pub seed: u64,
    pub burn_in: u64,
    pub records: Vec<DecompRecord>,
    pub final_x: DMatrix<f64>,
    pub covariance: Vec<CovarianceDecade>,
}

/// A failed run with the last checkpoint recorded before the failure.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("run failed at step {k}: {error}")]
pub struct RunFailure {
    pub error: EngineError,
    pub k: u64,
    pub last_checkpoint: Option<Box<DecompRecord>>,
}

impl From<EngineError> for RunFailure {
    fn from(error: EngineError) -> Self {
        RunFailure { error, k: 0, last_checkpoint: None }
    }
}

struct Recorder<'a> {
    pi: &'a StationaryVector,
    q: &'a DisagreementProjector,
    x_star: &'a DMatrix<f64>,
    spec: &'a RecorderSpec,
}

impl Recorder<'_> {
    fn record(&self, n: u64, x: &DMatrix<f64>, alpha_n: f64, t_n: f64, acc: &NoiseAccumulators) -> Result<DecompRecord, EngineError> {
        let parts = decompose(x, self.x_star, self.pi, self.q)?;
        let scale = lil_scale_from(alpha_n, t_n + alpha_n).ok();
        let m = self.pi.len();
        let delta = self.spec.delta.then(|| {
            let err_row = self.pi.as_row() * (x - self.x_star);
            (m as f64).sqrt() * (err_row - &acc.psi_row).norm()
        });
        let gamma = self.spec.gamma.then(|| operator_norm(&(self.q.matrix() * x - &acc.chi)));
        Ok(DecompRecord {
            n,
            alpha_n,
            t_n,
            lil_scale: scale,
            agreement: parts.agreement,
            disagreement: parts.disagreement,
            total: parts.total,
            lil_ratio: scale.map(|sc| parts.total / sc),
            psi: self.spec.psi.then(|| acc.psi_norm(m)),
            chi: self.spec.chi.then(|| acc.chi_norm()),
            delta,
            gamma,
        })
    }
}

/// Runs `horizon` steps from `init` and records decompositions at the
/// checkpoint indices. Bit-reproducible in `seed`.
#[allow(clippy::too_many_arguments)]
pub fn run_dsa(
    init: &DMatrix<f64>,
    w: &GossipMatrix,
    h: &DriveSpec,
    noise: &NoiseModel,
    s: &StepsizeSchedule,
    horizon: u64,
    recorder: &RecorderSpec,
    seed: u64,
) -> Result<RateTrace, RunFailure> {
    if horizon == 0 {
        return Err(EngineError::EmptyHorizon.into());
    }
    s.validate().map_err(EngineError::from)?;
    check_dims(init, w, h)?;
    let pi = stationary_vector(w).map_err(EngineError::from)?;
    let q = projector(&pi);
    let x_star = h.x_star(&pi)?;
    let rec = Recorder { pi: &pi, q: &q, x_star: &x_star, spec: recorder };
    let burn_in = recorder.burn_in.unwrap_or_else(|| default_burn_in(s, horizon));
    let marks = checkpoints(horizon, recorder.ratio, recorder.dense_below);

    let track_psi = recorder.psi || recorder.delta;
    let track_chi = recorder.chi || recorder.gamma;
    let a = h.drift();
    let mut acc = NoiseAccumulators::zeros(w.m(), h.d());
    let mut state = DsaState::new(init.clone(), seed);
    let mut records = Vec::with_capacity(marks.len());
    let mut t_n = 0.0;
    let mut next_mark = 0;
    let d = h.d();
    let mut cov: Vec<(u64, DMatrix<f64>)> = Vec::new();

    for n in 0..=horizon {
        let alpha_n = s.alpha_at_step(n);
        if marks.get(next_mark) == Some(&n) {
            records.push(rec.record(n, &state.x, alpha_n, t_n, &acc)?);
            next_mark += 1;
        }
        if n == horizon {
            break;
        }
        let step = dsa_step(&mut state, w, h, noise, s).map_err(|error| RunFailure {
            error,
            k: n + 1,
            last_checkpoint: records.last().cloned().map(Box::new),
        })?;
        if track_psi || track_chi {
            let exp_neg = a.exp_neg(step.alpha);
            if track_psi {
                crate::decomp::psi_update_with(&mut acc, &step.noise, &pi, &exp_neg, step.alpha);
            }
            if track_chi {
                crate::decomp::chi_update_with(&mut acc, &step.noise, w, &q, &exp_neg, step.alpha);
            }
        }
        if recorder.covariance && n >= 1 {
            let decade = (n as f64).log10().floor() as usize;
            if cov.len() <= decade {
                cov.resize(decade + 1, (0, DMatrix::zeros(d, d)));
            }
            let pm = pi.as_row() * &step.noise;
            cov[decade].0 += 1;
            cov[decade].1 += pm.transpose() * pm;
        }
        t_n += step.alpha;
    }

    let covariance = cov
        .into_iter()
        .enumerate()
        .filter(|(_, (count, _))| *count > 0)
        .map(|(decade, (count, sum))| CovarianceDecade {
            decade: decade as u32,
            count,
            mean: crate::spectral::rows_of(&(sum / count as f64)),
        })
        .collect();
    Ok(RateTrace { seed, burn_in, records, final_x: state.x, covariance })
}

/// Residuals of the noise-free fixed point of a linear drive.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointCheck {
    pub x_star: DMatrix<f64>,
    /// `‖W x* - x*‖`.
    pub consensus_residual: f64,
    /// `‖π h(x*)‖ = ‖πB - θ*A‖`.
    pub drift_residual: f64,
}

impl FixedPointCheck {
    pub fn residual(&self) -> f64 {
        self.consensus_residual.max(self.drift_residual)
    }
}

pub fn deterministic_fixed_point_check(
    w: &GossipMatrix,
    h: &DriveSpec,
    pi: &StationaryVector,
) -> Result<FixedPointCheck, EngineError> {
    let DriveSpec::Linear { .. } = h else {
        return Err(EngineError::DimensionMismatch("fixed point check needs a linear drive".into()));
    };
    let x_star = h.x_star(pi)?;
    let consensus_residual = operator_norm(&(w.entries() * &x_star - &x_star));
    let drift_residual = (pi.as_row() * h.eval(&x_star)).norm();
    Ok(FixedPointCheck { x_star, consensus_residual, drift_residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::{drift_spectrum, validate_gossip};
    use crate::td::{random_instance, two_state_instance, GossipTopology, RandomMdpSpec, TdInstance};
    use approx::assert_relative_eq;
    use nalgebra::dmatrix;

    fn gossip(w: DMatrix<f64>) -> GossipMatrix {
        validate_gossip(&w).unwrap()
    }

    /// `h ≡ 0`: with `A = I` and `f1(x) = x` the agreement part cancels and `B = 0`.
    fn zero_drive(m: usize, d: usize) -> DriveSpec {
        let pi = stationary_vector(&gossip(DMatrix::from_element(m, m, 1.0 / m as f64))).unwrap();
        let q = projector(&pi);
        DriveSpec::LinearPlusPerturbation(Box::new(PerturbedDrive {
            a: drift_spectrum(&DMatrix::identity(d, d)).unwrap(),
            b: DMatrix::zeros(m, d),
            pi,
            q,
            x_star: DMatrix::zeros(m, d),
            f1: Some(Arc::new(|x: &DMatrix<f64>| x.clone())),
            f2: None,
            order: 2.0,
        }))
    }

    #[test]
    fn identity_gossip_zero_drive_keeps_x() {
        let w = gossip(DMatrix::identity(1, 1));
        let h = zero_drive(1, 2);
        let x = dmatrix![1.0, -3.0];
        assert!(h.eval(&x).amax() < 1e-15);
        let mut st = DsaState::new(x.clone(), 0);
        dsa_step(&mut st, &w, &h, &NoiseModel::Zero, &StepsizeSchedule::type1(0.5)).unwrap();
        assert_eq!(st.x, x);
        assert_eq!(st.k, 1);
    }

    #[test]
    fn scalar_euler_step() {
        let w = gossip(dmatrix![1.0]);
        let h = DriveSpec::linear(drift_spectrum(&dmatrix![1.0]).unwrap(), dmatrix![0.0]).unwrap();
        let mut st = DsaState::new(dmatrix![2.0], 0);
        // Type1 with α0 = 0.5 at index 1 gives α = 0.5
        dsa_step(&mut st, &w, &h, &NoiseModel::Zero, &StepsizeSchedule::type1(0.5)).unwrap();
        assert_relative_eq!(st.x[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn pure_gossip_step() {
        let w = gossip(dmatrix![0.9, 0.1; 0.2, 0.8]);
        let h = zero_drive(2, 1);
        let mut st = DsaState::new(dmatrix![1.0; 0.0], 0);
        dsa_step(&mut st, &w, &h, &NoiseModel::Zero, &StepsizeSchedule::type1(0.5)).unwrap();
        assert_relative_eq!(st.x[(0, 0)], 0.9, epsilon = 1e-15);
        assert_relative_eq!(st.x[(1, 0)], 0.2, epsilon = 1e-15);
    }

    #[test]
    fn consensus_is_invariant_under_zero_drive() {
        let w = gossip(dmatrix![0.5, 0.3, 0.2; 0.1, 0.6, 0.3; 0.4, 0.4, 0.2]);
        let h = zero_drive(3, 2);
        // π-weighted mean of a consensus matrix is its common row, so h(1'y) = 0
        let x = DMatrix::from_fn(3, 2, |_, j| [1.5, -0.25][j]);
        let mut st = DsaState::new(x.clone(), 0);
        dsa_step(&mut st, &w, &h, &NoiseModel::Zero, &StepsizeSchedule::type1(0.5)).unwrap();
        assert!((st.x - x).amax() < 1e-15);
    }

    #[test]
    fn divergence_guard_trips() {
        let w = gossip(dmatrix![1.0]);
        let h = DriveSpec::linear(drift_spectrum(&dmatrix![1.0]).unwrap(), dmatrix![0.0]).unwrap();
        let mut st = DsaState::new(dmatrix![1e11], 0);
        let err = dsa_step(&mut st, &w, &h, &NoiseModel::Zero, &StepsizeSchedule::type1(-50.0)).unwrap_err();
        assert_eq!(err, EngineError::NonFinite { k: 1 });
    }

    #[test]
    fn fixed_point_examples() {
        let w1 = gossip(dmatrix![1.0]);
        let pi1 = stationary_vector(&w1).unwrap();
        let h = DriveSpec::linear(drift_spectrum(&DMatrix::identity(2, 2)).unwrap(), DMatrix::zeros(1, 2)).unwrap();
        let fp = deterministic_fixed_point_check(&w1, &h, &pi1).unwrap();
        assert_eq!(fp.x_star, DMatrix::zeros(1, 2));
        assert_eq!(fp.residual(), 0.0);

        let h = DriveSpec::linear(drift_spectrum(&dmatrix![2.0]).unwrap(), dmatrix![4.0]).unwrap();
        let fp = deterministic_fixed_point_check(&w1, &h, &pi1).unwrap();
        assert_relative_eq!(fp.x_star[(0, 0)], 2.0, epsilon = 1e-15);
        assert!(fp.residual() <= 1e-12);

        let inst = TdInstance::from_doc(&two_state_instance(&[1.0], &GossipTopology::Complete).unwrap()).unwrap();
        let fp = deterministic_fixed_point_check(&inst.mdp.gossip, &inst.drive(), &inst.pi).unwrap();
        assert_relative_eq!(fp.x_star[(0, 0)], 12.0 / 11.0, epsilon = 1e-14);
        assert!(fp.residual() <= 1e-10);
    }

    #[test]
    fn horizon_zero_is_rejected() {
        let inst = TdInstance::from_doc(&two_state_instance(&[1.0], &GossipTopology::Complete).unwrap()).unwrap();
        let err = run_dsa(
            &DMatrix::zeros(1, 1),
            &inst.mdp.gossip,
            &inst.drive(),
            &NoiseModel::Zero,
            &StepsizeSchedule::type1(1.0),
            0,
            &RecorderSpec::default(),
            0,
        )
        .unwrap_err();
        assert_eq!(err.error, EngineError::EmptyHorizon);
    }

    #[test]
    fn noise_free_two_state_run_reaches_fixed_point() {
        let inst = TdInstance::from_doc(&two_state_instance(&[1.0], &GossipTopology::Complete).unwrap()).unwrap();
        let a0 = 1.0 / inst.truth.a.lambda_min();
        let trace = run_dsa(
            &DMatrix::zeros(1, 1),
            &inst.mdp.gossip,
            &inst.drive(),
            &NoiseModel::Zero,
            &StepsizeSchedule::type1(a0),
            100_000,
            &RecorderSpec::default(),
            0,
        )
        .unwrap();
        assert!((trace.final_x[(0, 0)] - 12.0 / 11.0).abs() < 1e-6);
        assert_eq!(trace.records.last().unwrap().n, 100_000);
    }

    #[test]
    fn checkpoint_schedule() {
        let c = checkpoints(1000, 1.05, 100);
        assert_eq!(&c[..3], &[0, 1, 2]);
        assert_eq!(c[100], 100);
        assert_eq!(c[101], 105);
        assert_eq!(*c.last().unwrap(), 1000);
        assert!(c.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(checkpoints(5, 1.05, 100), vec![0, 1, 2, 3, 4, 5]);
    }

    fn random_td(seed: u64) -> TdInstance {
        let doc = random_instance(&RandomMdpSpec {
            states: 4,
            agents: 3,
            actions_per_agent: 2,
            features: 2,
            density: 1.0,
            reward_scale: 1.0,
            disc: 0.7,
            seed,
            gossip: GossipTopology::Random,
        })
        .unwrap();
        TdInstance::from_doc(&doc).unwrap()
    }

    #[test]
    fn pi_projection_recursion_holds_each_step() {
        let inst = random_td(11);
        let h = inst.drive();
        let noise = NoiseModel::TdSampling(inst.sampler());
        let s = StepsizeSchedule::type_gamma(1.0, 0.7, 0.0);
        let mut st = DsaState::new(DMatrix::from_element(3, 2, 0.3), 5);
        for _ in 0..500 {
            let x = st.x.clone();
            let step = dsa_step(&mut st, &inst.mdp.gossip, &h, &noise, &s).unwrap();
            let lhs = inst.pi.as_row() * &st.x;
            let rhs = inst.pi.as_row() * &x + inst.pi.as_row() * (h.eval(&x) + &step.noise) * step.alpha;
            assert!((lhs - rhs).amax() <= 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic_in_seed() {
        let inst = random_td(12);
        let run = |seed| {
            run_dsa(
                &DMatrix::zeros(3, 2),
                &inst.mdp.gossip,
                &inst.drive(),
                &NoiseModel::TdSampling(inst.sampler()),
                &StepsizeSchedule::type_gamma(1.0, 0.7, 0.0),
                2000,
                &RecorderSpec { psi: true, chi: true, delta: true, gamma: true, covariance: true, ..Default::default() },
                seed,
            )
            .unwrap()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3).final_x, run(4).final_x);
    }

    fn mean_zero_check(noise: &NoiseModel, x: &DMatrix<f64>) {
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut sum = DMatrix::zeros(x.nrows(), x.ncols());
        let mut sq = DMatrix::zeros(x.nrows(), x.ncols());
        for _ in 0..draws {
            let m = noise.sample(x, &mut rng);
            sq += m.component_mul(&m);
            sum += m;
        }
        let mean = &sum / draws as f64;
        for (i, mu) in mean.iter().enumerate() {
            let var = sq[i] / draws as f64 - mu * mu;
            assert!(mu.abs() <= 4.0 * var.sqrt() / (draws as f64).sqrt(), "entry {i}: {mu}");
        }
    }

    #[test]
    fn gaussian_noise_has_mean_zero() {
        mean_zero_check(&NoiseModel::Gaussian { std: vec![1.0, 0.5] }, &DMatrix::zeros(2, 3));
    }

    #[test]
    fn td_noise_has_mean_zero_at_fixed_state() {
        let inst = random_td(13);
        mean_zero_check(&NoiseModel::TdSampling(inst.sampler()), &DMatrix::from_element(3, 2, -0.7));
    }

    #[test]
    fn tracked_residuals_are_recorded() {
        let inst = random_td(14);
        let trace = run_dsa(
            &DMatrix::zeros(3, 2),
            &inst.mdp.gossip,
            &inst.drive(),
            &NoiseModel::TdSampling(inst.sampler()),
            &StepsizeSchedule::type_gamma(1.0, 0.7, 0.0),
            500,
            &RecorderSpec { psi: true, chi: true, delta: true, gamma: true, covariance: true, ..Default::default() },
            1,
        )
        .unwrap();
        let last = trace.records.last().unwrap();
        assert!(last.psi.is_some() && last.chi.is_some() && last.delta.is_some() && last.gamma.is_some());
        assert!(trace.records.iter().all(|r| r.total <= r.agreement + r.disagreement + 1e-9));
        assert_eq!(trace.covariance.len(), 3);
        assert_eq!(trace.covariance[0].count, 9);
    }
}
