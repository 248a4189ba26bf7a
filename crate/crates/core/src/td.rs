//! Multi-agent MDP policy evaluation with distributed TD(0) and linear
//! function approximation, plus exact ground truth.
//!
//! Conventions: `φ(s)` is the `s`-th row of the `L x d` feature matrix and
//! parameters are row vectors. The per-sample drift matrix is
//! `A_n = φ(s)'φ(s) - disc·φ(s̃)'φ(s)` so an agent's update reads
//! `θ ← Σ_j W_ij θ_j + α (R_i φ(s) - θ A_n)`. The conventional TD matrix
//! `Φ'D(I - disc·P)Φ` is the transpose of `A = E[A_n]` stored here.
//!
//! Two symbols that are easy to confuse are kept apart: `disc` is the
//! discount factor and `gamma_exp` (in [`crate::schedule`]) the stepsize
//! exponent.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::DriveSpec;
use crate::schedule::StepsizeSchedule;
use crate::spectral::{
    drift_spectrum, matrix_from_rows, projector, rows_of, stationary_vector, validate_gossip, DisagreementProjector,
    DriftMatrix, GossipMatrix, SpectralError, StationaryVector,
};

/// Largest supported joint-action space (4 agents with 3 actions each).
pub const MAX_JOINT_ACTIONS: usize = 81;
const PROB_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("gossip matrix: {0}")]
    Gossip(#[source] SpectralError),
    #[error("induced chain is reducible: state {unreachable} not reachable")]
    ReducibleChain { unreachable: usize },
    #[error("induced chain is periodic with period {period}")]
    PeriodicChain { period: usize },
    #[error("induced chain stationary distribution: {0}")]
    Chain(#[source] SpectralError),
    #[error("feature matrix is rank deficient (smallest singular value {sigma_min:e})")]
    RankDeficientFeatures { sigma_min: f64 },
    #[error("drift matrix A is singular or not positive definite: {0}")]
    SingularA(String),
}

/// Serialized form of a complete policy-evaluation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdInstanceDoc {
    pub states: usize,
    pub agents: usize,
    /// Number of local actions per agent.
    pub action_counts: Vec<usize>,
    /// Discount factor in `(0,1)`; `0` is accepted (myopic values).
    pub disc: f64,
    /// `kernel[s][a][s_next]`, `a` the mixed-radix joint action (agent 0 fastest).
    pub kernel: Vec<Vec<Vec<f64>>>,
    /// `rewards[i][s][a][s_next]`.
    pub rewards: Vec<Vec<Vec<Vec<f64>>>>,
    /// `policy[i][s][a_i]`.
    pub policy: Vec<Vec<Vec<f64>>>,
    /// `features[s]` is `φ(s)`.
    pub features: Vec<Vec<f64>>,
    /// Gossip matrix rows.
    pub gossip: Vec<Vec<f64>>,
}

impl TdInstanceDoc {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serialization")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn sha256(&self) -> String {
        let compact = serde_json::to_string(self).expect("instance serialization");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }

    pub fn joint_actions(&self) -> usize {
        self.action_counts.iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdpModel {
    pub states: usize,
    pub agents: usize,
    pub action_counts: Vec<usize>,
    pub kernel: Vec<Vec<Vec<f64>>>,
    pub rewards: Vec<Vec<Vec<Vec<f64>>>>,
    pub disc: f64,
    pub gossip: GossipMatrix,
}

impl MdpModel {
    pub fn joint_actions(&self) -> usize {
        self.action_counts.iter().product()
    }

    /// Local action of `agent` within joint action `joint`.
    pub fn local_action(&self, joint: usize, agent: usize) -> usize {
        let stride: usize = self.action_counts[..agent].iter().product();
        (joint / stride) % self.action_counts[agent]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl PolicyModel {
    /// `μ(a|s) = Π_i μ_i(a_i|s)`.
    pub fn joint_prob(&self, mdp: &MdpModel, s: usize, joint: usize) -> f64 {
        (0..mdp.agents).map(|i| self.probs[i][s][mdp.local_action(joint, i)]).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InducedChain {
    pub p_mu: DMatrix<f64>,
    pub varphi: RowDVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix(DMatrix<f64>);

impl FeatureMatrix {
    pub fn new(phi: DMatrix<f64>) -> Result<Self, TdError> {
        if phi.ncols() == 0 || phi.ncols() > phi.nrows() {
            return Err(TdError::RankDeficientFeatures { sigma_min: 0.0 });
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(TdError::InvalidModel("non-finite feature".into()));
        }
        let sigma_min = phi.singular_values().min();
        if sigma_min <= 1e-8 {
            return Err(TdError::RankDeficientFeatures { sigma_min });
        }
        Ok(FeatureMatrix(phi))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, s: usize) -> RowDVector<f64> {
        self.0.row(s).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdGroundTruth {
    pub a: DriftMatrix,
    pub b: DMatrix<f64>,
    pub theta_star: RowDVector<f64>,
    pub x_star: DMatrix<f64>,
    pub j_mu: DVector<f64>,
}

/// A validated instance with all exact oracles precomputed.
#[derive(Debug, Clone)]
pub struct TdInstance {
    pub mdp: MdpModel,
    pub policy: PolicyModel,
    pub features: FeatureMatrix,
    pub chain: InducedChain,
    pub pi: StationaryVector,
    pub q: DisagreementProjector,
    pub truth: TdGroundTruth,
    pub doc: TdInstanceDoc,
}

impl TdInstance {
    pub fn from_doc(doc: &TdInstanceDoc) -> Result<Self, TdError> {
        let (mdp, policy, features) = models_from_doc(doc)?;
        let chain = induce_chain(&mdp, &policy)?;
        let pi = stationary_vector(&mdp.gossip).map_err(TdError::Gossip)?;
        let truth = exact_moments(&mdp, &policy, &chain, &features)?;
        let q = projector(&pi);
        Ok(TdInstance { mdp, policy, features, chain, pi, q, truth, doc: doc.clone() })
    }

    /// The linear drive `h(x) = B - xA`.
    pub fn drive(&self) -> DriveSpec {
        DriveSpec::linear(self.truth.a.clone(), self.truth.b.clone()).expect("ground truth dimensions")
    }

    pub fn sampler(&self) -> Arc<TdSampler> {
        Arc::new(TdSampler::new(self))
    }

    /// Fixed point obtained by weighting agents with `weights` instead of π.
    pub fn weighted_fixed_point(&self, weights: &RowDVector<f64>) -> Result<RowDVector<f64>, TdError> {
        let target = weights * &self.truth.b;
        solve_right(&target, self.truth.a.matrix())
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<(), TdError> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(TdError::InvalidModel(format!("{what}: negative or non-finite probability")));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(TdError::InvalidModel(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(())
}

/// Validates shapes and probability tables and builds the typed models.
pub fn models_from_doc(doc: &TdInstanceDoc) -> Result<(MdpModel, PolicyModel, FeatureMatrix), TdError> {
    let l = doc.states;
    let m = doc.agents;
    if l == 0 || m == 0 {
        return Err(TdError::InvalidModel("states and agents must be positive".into()));
    }
    if doc.action_counts.len() != m || doc.action_counts.contains(&0) {
        return Err(TdError::InvalidModel("action_counts must list a positive count per agent".into()));
    }
    let joint = doc.joint_actions();
    if joint > MAX_JOINT_ACTIONS {
        return Err(TdError::InvalidModel(format!("joint action space {joint} exceeds {MAX_JOINT_ACTIONS}")));
    }
    if !(0.0..1.0).contains(&doc.disc) {
        return Err(TdError::InvalidModel(format!("disc must lie in [0,1), got {}", doc.disc)));
    }
    if doc.kernel.len() != l || doc.kernel.iter().any(|k| k.len() != joint || k.iter().any(|r| r.len() != l)) {
        return Err(TdError::InvalidModel(format!("kernel must be {l} x {joint} x {l}")));
    }
    for (s, per_action) in doc.kernel.iter().enumerate() {
        for (a, row) in per_action.iter().enumerate() {
            check_distribution(row, &format!("kernel[{s}][{a}]"))?;
        }
    }
    if doc.rewards.len() != m
        || doc.rewards.iter().any(|r| {
            r.len() != l || r.iter().any(|ra| ra.len() != joint || ra.iter().any(|rs| rs.len() != l))
        })
    {
        return Err(TdError::InvalidModel(format!("rewards must be {m} x {l} x {joint} x {l}")));
    }
    if doc.rewards.iter().flatten().flatten().flatten().any(|r| !r.is_finite()) {
        return Err(TdError::InvalidModel("rewards must be finite".into()));
    }
    if doc.policy.len() != m {
        return Err(TdError::InvalidModel("policy needs one table per agent".into()));
    }
    for (i, table) in doc.policy.iter().enumerate() {
        if table.len() != l || table.iter().any(|row| row.len() != doc.action_counts[i]) {
            return Err(TdError::InvalidModel(format!("policy[{i}] must be {l} x {}", doc.action_counts[i])));
        }
        for (s, row) in table.iter().enumerate() {
            check_distribution(row, &format!("policy[{i}][{s}]"))?;
        }
    }
    if doc.features.len() != l {
        return Err(TdError::InvalidModel(format!("features must have {l} rows")));
    }
    let phi = matrix_from_rows(&doc.features).map_err(|e| TdError::InvalidModel(e.to_string()))?;
    let features = FeatureMatrix::new(phi)?;
    let w = matrix_from_rows(&doc.gossip).map_err(TdError::Gossip)?;
    if w.nrows() != m {
        return Err(TdError::InvalidModel(format!("gossip matrix must be {m} x {m}")));
    }
    let gossip = validate_gossip(&w).map_err(TdError::Gossip)?;
    let mdp = MdpModel {
        states: l,
        agents: m,
        action_counts: doc.action_counts.clone(),
        kernel: doc.kernel.clone(),
        rewards: doc.rewards.clone(),
        disc: doc.disc,
        gossip,
    };
    Ok((mdp, PolicyModel { probs: doc.policy.clone() }, features))
}

/// State kernel `P^μ(s, s̃) = Σ_a μ(a|s) P(s̃|s,a)` and its stationary law.
pub fn induce_chain(mdp: &MdpModel, policy: &PolicyModel) -> Result<InducedChain, TdError> {
    let l = mdp.states;
    let mut p_mu = DMatrix::zeros(l, l);
    for s in 0..l {
        for a in 0..mdp.joint_actions() {
            let pa = policy.joint_prob(mdp, s, a);
            for s_next in 0..l {
                p_mu[(s, s_next)] += pa * mdp.kernel[s][a][s_next];
            }
        }
    }
    let certified = validate_gossip(&p_mu).map_err(|e| match e {
        SpectralError::Reducible { unreachable } => TdError::ReducibleChain { unreachable },
        SpectralError::Periodic { period } => TdError::PeriodicChain { period },
        other => TdError::Chain(other),
    })?;
    let varphi = stationary_vector(&certified).map_err(TdError::Chain)?;
    Ok(InducedChain { p_mu, varphi: varphi.as_row().clone() })
}

/// Expected reward `r̄_i(s) = E_{a, s̃}[R_i(s, a, s̃)]`, as an `m x L` matrix.
pub fn mean_rewards(mdp: &MdpModel, policy: &PolicyModel) -> DMatrix<f64> {
    let mut r = DMatrix::zeros(mdp.agents, mdp.states);
    for i in 0..mdp.agents {
        for s in 0..mdp.states {
            let mut acc = 0.0;
            for a in 0..mdp.joint_actions() {
                let pa = policy.joint_prob(mdp, s, a);
                for s_next in 0..mdp.states {
                    acc += pa * mdp.kernel[s][a][s_next] * mdp.rewards[i][s][a][s_next];
                }
            }
            r[(i, s)] = acc;
        }
    }
    r
}

/// Solves `θ A = target` for the row vector `θ`.
fn solve_right(target: &RowDVector<f64>, a: &DMatrix<f64>) -> Result<RowDVector<f64>, TdError> {
    let col = a
        .transpose()
        .lu()
        .solve(&target.transpose())
        .ok_or_else(|| TdError::SingularA("LU solve failed".into()))?;
    Ok(col.transpose())
}

/// Exact `A = E[A_n]`, `B = E[B_n]`, `θ* = πBA⁻¹`, `x* = 1'θ*` and `J^μ`.
pub fn exact_moments(
    mdp: &MdpModel,
    policy: &PolicyModel,
    chain: &InducedChain,
    features: &FeatureMatrix,
) -> Result<TdGroundTruth, TdError> {
    let phi = features.matrix();
    let d = features.d();
    let p_phi = &chain.p_mu * phi;
    let mut a = DMatrix::zeros(d, d);
    for s in 0..mdp.states {
        let row = phi.row(s);
        let diff = row - p_phi.row(s) * mdp.disc;
        // diff' φ(s): column (φ - disc P φ)(s)' times row φ(s)
        a += diff.transpose() * row * chain.varphi[s];
    }
    let rbar = mean_rewards(mdp, policy);
    let mut b = DMatrix::zeros(mdp.agents, d);
    for i in 0..mdp.agents {
        for s in 0..mdp.states {
            let scaled = phi.row(s) * (chain.varphi[s] * rbar[(i, s)]);
            let mut bi = b.row_mut(i);
            bi += scaled;
        }
    }
    let drift = drift_spectrum(&a).map_err(|e| TdError::SingularA(e.to_string()))?;
    let pi = stationary_vector(&mdp.gossip).map_err(TdError::Gossip)?;
    let theta_star = solve_right(&(pi.as_row() * &b), drift.matrix())?;
    let x_star = DMatrix::from_fn(mdp.agents, d, |_, j| theta_star[j]);
    let j_mu = bellman_value(mdp, policy, chain, &pi);
    Ok(TdGroundTruth { a: drift, b, theta_star, x_star, j_mu })
}

/// `J^μ = (I - disc·P^μ)^{-1} r̄_π` with `r̄_π = Σ_i π_i r̄_i`.
pub fn bellman_value(mdp: &MdpModel, policy: &PolicyModel, chain: &InducedChain, pi: &StationaryVector) -> DVector<f64> {
    let l = mdp.states;
    let r_pi = (pi.as_row() * mean_rewards(mdp, policy)).transpose();
    let system = DMatrix::identity(l, l) - &chain.p_mu * mdp.disc;
    system.lu().solve(&r_pi).expect("I - disc P is invertible for disc < 1")
}

/// One i.i.d. transition `(s, a, s̃)` with per-agent rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub s: usize,
    pub action: usize,
    pub s_next: usize,
    pub rewards: Vec<f64>,
}

/// Precomputed cumulative tables for i.i.d. sampling
/// `s ~ φ`, `a ~ μ(·|s)`, `s̃ ~ P(·|s,a)`, and the TD noise built on it.
#[derive(Debug, Clone)]
pub struct TdSampler {
    state_cdf: Vec<f64>,
    action_cdf: Vec<Vec<f64>>,
    next_cdf: Vec<Vec<Vec<f64>>>,
    rewards: Vec<Vec<Vec<Vec<f64>>>>,
    agents: usize,
    disc: f64,
    phi: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

fn cdf(weights: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .into_iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cdf: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl TdSampler {
    pub fn new(inst: &TdInstance) -> Self {
        let mdp = &inst.mdp;
        let joint = mdp.joint_actions();
        TdSampler {
            state_cdf: cdf(inst.chain.varphi.iter().copied()),
            action_cdf: (0..mdp.states).map(|s| cdf((0..joint).map(|a| inst.policy.joint_prob(mdp, s, a)))).collect(),
            next_cdf: mdp.kernel.iter().map(|per_a| per_a.iter().map(|row| cdf(row.iter().copied())).collect()).collect(),
            rewards: mdp.rewards.clone(),
            agents: mdp.agents,
            disc: mdp.disc,
            phi: inst.features.matrix().clone(),
            a: inst.truth.a.matrix().clone(),
            b: inst.truth.b.clone(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Sample {
        let s = draw(&self.state_cdf, rng);
        let action = draw(&self.action_cdf[s], rng);
        let s_next = draw(&self.next_cdf[s][action], rng);
        let rewards = (0..self.agents).map(|i| self.rewards[i][s][action][s_next]).collect();
        Sample { s, action, s_next, rewards }
    }

    /// `A_n = φ(s)'φ(s) - disc·φ(s̃)'φ(s)`.
    pub fn a_n(&self, sample: &Sample) -> DMatrix<f64> {
        let row = self.phi.row(sample.s);
        let u = row - self.phi.row(sample.s_next) * self.disc;
        u.transpose() * row
    }

    /// `B_n`, row `i` equal to `R_i φ(s)`.
    pub fn b_n(&self, sample: &Sample) -> DMatrix<f64> {
        let d = self.phi.ncols();
        DMatrix::from_fn(self.agents, d, |i, j| sample.rewards[i] * self.phi[(sample.s, j)])
    }

    /// `M_{n+1} = (B_n - B) - x(A_n - A)`.
    pub fn noise_for(&self, sample: &Sample, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = self.phi.ncols();
        let (s, s_next) = (sample.s, sample.s_next);
        let mut out = x * &self.a - &self.b;
        for i in 0..self.agents {
            // (x A_n)_i = (x_i · u) φ(s), u = φ(s) - disc φ(s̃)
            let xu: f64 = (0..d).map(|j| x[(i, j)] * (self.phi[(s, j)] - self.disc * self.phi[(s_next, j)])).sum();
            let coef = sample.rewards[i] - xu;
            for j in 0..d {
                out[(i, j)] += coef * self.phi[(s, j)];
            }
        }
        out
    }

    pub fn noise(&self, x: &DMatrix<f64>, rng: &mut impl Rng) -> DMatrix<f64> {
        let sample = self.sample(rng);
        self.noise_for(&sample, x)
    }
}

/// One-off draw of `(s, a, s̃, rewards)` (builds the sampling tables each call).
pub fn sample_step(inst: &TdInstance, rng: &mut impl Rng) -> Sample {
    TdSampler::new(inst).sample(rng)
}

/// `M_{n+1} = (B_n - B) - x_n (A_n - A)` for a given sample.
pub fn td_noise(sample: &Sample, x: &DMatrix<f64>, inst: &TdInstance) -> DMatrix<f64> {
    TdSampler::new(inst).noise_for(sample, x)
}

/// Gossip topologies used by the generator and configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GossipTopology {
    /// Ring edges `i+1 -> i`, self-loops and random extra edges, random weights.
    Random,
    /// `W_ii = self_weight`, `W_{i,i+1} = 1 - self_weight`.
    Ring { self_weight: f64 },
    /// Uniform averaging `W = 1'1/m`.
    Complete,
    /// Hub keeps `hub_self` of its own estimate and spreads the rest over the
    /// spokes; every spoke listens to the hub with weight `beta`. Row
    /// stochastic, not doubly stochastic, `π` concentrated on the hub.
    Broadcast { hub: usize, beta: f64, hub_self: f64 },
    Matrix { rows: Vec<Vec<f64>> },
}

impl GossipTopology {
    pub fn build(&self, m: usize, rng: &mut impl Rng) -> Result<GossipMatrix, SpectralError> {
        let w = match self {
            GossipTopology::Random => {
                let mut w = DMatrix::zeros(m, m);
                for i in 0..m {
                    for j in 0..m {
                        let edge = i == j || j == (i + 1) % m || rng.random::<f64>() < 0.3;
                        if edge {
                            let e: f64 = Exp1.sample(rng);
                            w[(i, j)] = e + 0.05;
                        }
                    }
                    let sum: f64 = w.row(i).sum();
                    w.row_mut(i).scale_mut(1.0 / sum);
                    let fixed: f64 = 1.0 - (w.row(i).sum() - w[(i, i)]);
                    w[(i, i)] = fixed;
                }
                w
            }
            GossipTopology::Ring { self_weight } => {
                let mut w = DMatrix::zeros(m, m);
                for i in 0..m {
                    if m == 1 {
                        w[(i, i)] = 1.0;
                    } else {
                        w[(i, i)] = *self_weight;
                        w[(i, (i + 1) % m)] = 1.0 - self_weight;
                    }
                }
                w
            }
            GossipTopology::Complete => DMatrix::from_element(m, m, 1.0 / m as f64),
            GossipTopology::Broadcast { hub, beta, hub_self } => broadcast_matrix(m, *hub, *beta, *hub_self)?,
            GossipTopology::Matrix { rows } => matrix_from_rows(rows)?,
        };
        validate_gossip(&w)
    }
}

fn broadcast_matrix(m: usize, hub: usize, beta: f64, hub_self: f64) -> Result<DMatrix<f64>, SpectralError> {
    if m < 2 || hub >= m {
        return Err(SpectralError::Parse(format!("broadcast needs m >= 2 and hub < m (m = {m}, hub = {hub})")));
    }
    let mut w = DMatrix::zeros(m, m);
    let share = (1.0 - hub_self) / (m - 1) as f64;
    for j in 0..m {
        w[(hub, j)] = if j == hub { hub_self } else { share };
    }
    for i in (0..m).filter(|&i| i != hub) {
        w[(i, hub)] = beta;
        w[(i, i)] = 1.0 - beta;
    }
    Ok(w)
}

/// Parameters of the random instance generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomMdpSpec {
    pub states: usize,
    pub agents: usize,
    pub actions_per_agent: usize,
    /// Feature dimension `d <= states`.
    pub features: usize,
    /// Fraction of kernel entries drawn at full weight; the rest get a small
    /// positive weight so every entry stays strictly positive.
    #[serde(default = "one")]
    pub density: f64,
    #[serde(default = "one")]
    pub reward_scale: f64,
    pub disc: f64,
    pub seed: u64,
    #[serde(default = "default_topology")]
    pub gossip: GossipTopology,
}

fn one() -> f64 {
    1.0
}

fn default_topology() -> GossipTopology {
    GossipTopology::Random
}

fn simplex_row(rng: &mut impl Rng, len: usize, density: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            let keep = rng.random::<f64>() < density;
            if keep {
                e + 1e-3
            } else {
                1e-3 * (e + 1e-3)
            }
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    let mut row: Vec<f64> = raw.iter().map(|v| v / sum).collect();
    // absorb rounding so the row sums to 1 within 1e-15
    let tail: f64 = row[1..].iter().sum();
    row[0] = 1.0 - tail;
    row
}

/// Generates a random instance document, deterministic in `spec.seed`.
pub fn random_instance(spec: &RandomMdpSpec) -> Result<TdInstanceDoc, TdError> {
    let RandomMdpSpec { states: l, agents: m, actions_per_agent: k, features: d, density, reward_scale, disc, seed, .. } =
        *spec;
    if l < 2 || d == 0 || d > l {
        return Err(TdError::InvalidModel(format!("need states >= 2 and 1 <= d <= states (L = {l}, d = {d})")));
    }
    if m == 0 || k == 0 {
        return Err(TdError::InvalidModel("agents and actions must be positive".into()));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(TdError::InvalidModel(format!("density must lie in (0,1], got {density}")));
    }
    let joint = k.checked_pow(m as u32).unwrap_or(usize::MAX);
    if joint > MAX_JOINT_ACTIONS {
        return Err(TdError::InvalidModel(format!("joint action space {joint} exceeds {MAX_JOINT_ACTIONS}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel: Vec<Vec<Vec<f64>>> =
        (0..l).map(|_| (0..joint).map(|_| simplex_row(&mut rng, l, density)).collect()).collect();
    let policy: Vec<Vec<Vec<f64>>> = (0..m).map(|_| (0..l).map(|_| simplex_row(&mut rng, k, 1.0)).collect()).collect();
    let rewards: Vec<Vec<Vec<Vec<f64>>>> = (0..m)
        .map(|_| {
            (0..l)
                .map(|_| (0..joint).map(|_| (0..l).map(|_| reward_scale * rng.random::<f64>()).collect()).collect())
                .collect()
        })
        .collect();
    let mut features = None;
    let mut sigma_min = 0.0;
    for _ in 0..100 {
        let phi = DMatrix::from_fn(l, d, |_, _| StandardNormal.sample(&mut rng));
        match FeatureMatrix::new(phi) {
            Ok(f) => {
                features = Some(f);
                break;
            }
            Err(TdError::RankDeficientFeatures { sigma_min: s }) => sigma_min = s,
            Err(e) => return Err(e),
        }
    }
    let features = features.ok_or(TdError::RankDeficientFeatures { sigma_min })?;
    let gossip = spec.gossip.build(m, &mut rng).map_err(TdError::Gossip)?;
    Ok(TdInstanceDoc {
        states: l,
        agents: m,
        action_counts: vec![k; m],
        disc,
        kernel,
        rewards,
        policy,
        features: rows_of(features.matrix()),
        gossip: gossip.to_rows(),
    })
}

/// Typed form of [`random_instance`].
pub fn random_mdp(spec: &RandomMdpSpec) -> Result<(MdpModel, PolicyModel, FeatureMatrix), TdError> {
    models_from_doc(&random_instance(spec)?)
}

/// The two-state instance with a uniform kernel, `Φ = [[1],[2]]`, `disc = 0.5`,
/// one action per agent and constant reward `rewards[i]` for agent `i`.
/// With one agent and reward 1: `A = 1.375`, `B = 1.5`, `θ* = 12/11`, `J = (2, 2)`.
pub fn two_state_instance(rewards: &[f64], gossip: &GossipTopology) -> Result<TdInstanceDoc, TdError> {
    let m = rewards.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w = gossip.build(m, &mut rng).map_err(TdError::Gossip)?;
    Ok(TdInstanceDoc {
        states: 2,
        agents: m,
        action_counts: vec![1; m],
        disc: 0.5,
        kernel: vec![vec![vec![0.5, 0.5]]; 2],
        rewards: rewards.iter().map(|&r| vec![vec![vec![r; 2]]; 2]).collect(),
        policy: vec![vec![vec![1.0]; 2]; m],
        features: vec![vec![1.0], vec![2.0]],
        gossip: w.to_rows(),
    })
}

/// Outcome of one assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }

    pub fn text(&self) -> String {
        let mut out = String::from("assumption report\n");
        for c in &self.checks {
            out.push_str(&format!(
                "  [{}] {:<4} {:<28} {}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.id,
                c.name,
                c.detail
            ));
        }
        out.push_str(&format!("overall: {}\n", if self.all_passed() { "PASS" } else { "FAIL" }));
        out
    }

    fn push(&mut self, id: &str, name: &str, result: Result<String, String>) {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(AssumptionCheck { id: id.into(), name: name.into(), passed, detail });
    }
}

/// Exact `E[M_{n+1}]` and `E[M'π'πM]` at a given `x` by enumerating every
/// `(s, a, s̃)` outcome.
fn exact_noise_moments(inst: &TdInstance, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let sampler = TdSampler::new(inst);
    let mdp = &inst.mdp;
    let d = inst.features.d();
    let mut mean = DMatrix::zeros(mdp.agents, d);
    let mut second = DMatrix::zeros(d, d);
    for s in 0..mdp.states {
        for a in 0..mdp.joint_actions() {
            let pa = inst.chain.varphi[s] * inst.policy.joint_prob(mdp, s, a);
            if pa == 0.0 {
                continue;
            }
            for s_next in 0..mdp.states {
                let p = pa * mdp.kernel[s][a][s_next];
                if p == 0.0 {
                    continue;
                }
                let rewards = (0..mdp.agents).map(|i| mdp.rewards[i][s][a][s_next]).collect();
                let sample = Sample { s, action: a, s_next, rewards };
                let noise = sampler.noise_for(&sample, x);
                let pm = inst.pi.as_row() * &noise;
                mean += &noise * p;
                second += pm.transpose() * pm * p;
            }
        }
    }
    (mean, second)
}

/// Checks the gossip, drift, stepsize and noise requirements for running
/// distributed TD(0) on `doc` with stepsize `schedule`. Failures are report
/// entries, never errors.
pub fn verify_assumptions(doc: &TdInstanceDoc, schedule: &StepsizeSchedule) -> AssumptionReport {
    let mut report = AssumptionReport { checks: Vec::new() };

    let gossip = matrix_from_rows(&doc.gossip).and_then(|w| validate_gossip(&w));
    report.push(
        "A1",
        "gossip matrix",
        match &gossip {
            Ok(w) => Ok(format!(
                "irreducible, aperiodic, row stochastic (m = {}, doubly stochastic: {})",
                w.m(),
                w.certificate().doubly_stochastic
            )),
            Err(e) => Err(e.to_string()),
        },
    );

    let inst = TdInstance::from_doc(doc);
    report.push(
        "MDP",
        "instance and induced chain",
        match &inst {
            Ok(i) => Ok(format!(
                "L = {}, d = {}, joint actions = {}, chain irreducible and aperiodic",
                i.mdp.states,
                i.features.d(),
                i.mdp.joint_actions()
            )),
            Err(e) => Err(e.to_string()),
        },
    );
    let Ok(inst) = inst else {
        for (id, name) in [("A2", "drift structure"), ("A3", "stepsize"), ("A4", "noise")] {
            report.push(id, name, Err("instance invalid; not checked".into()));
        }
        return report;
    };

    let a = &inst.truth.a;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let drive = inst.drive();
    let mut worst = 0.0_f64;
    for _ in 0..4 {
        let x = DMatrix::from_fn(inst.mdp.agents, a.d(), |_, _| StandardNormal.sample(&mut rng));
        let direct = drive.eval(&x);
        let err = &x - &inst.truth.x_star;
        let structured = -(inst.pi.consensus_matrix() * err * a.matrix())
            + inst.q.matrix() * (&inst.truth.b - &x * a.matrix());
        worst = worst.max((direct - structured).amax());
    }
    report.push(
        "A2",
        "drift structure",
        if worst <= 1e-9 {
            Ok(format!(
                "h(x) = B - xA with f1 = 0, f2 = -xA (max residual {worst:.1e}); sym. min eig {:.4}, lambda_min {:.4}",
                a.sym_min_eigenvalue(),
                a.lambda_min()
            ))
        } else {
            Err(format!("decomposition residual {worst:e}"))
        },
    );

    report.push(
        "A3",
        "stepsize",
        match schedule.check_against(a) {
            Ok(()) => Ok(match schedule {
                StepsizeSchedule::Type1 { alpha0, .. } => {
                    format!("alpha0 = {alpha0} > 1/(2 lambda_min) = {:.6}", 1.0 / (2.0 * a.lambda_min()))
                }
                StepsizeSchedule::TypeGamma { gamma_exp, .. } => format!("regularly varying, gamma_exp = {gamma_exp}"),
            }),
            Err(e) => Err(e.to_string()),
        },
    );

    let x_probe = DMatrix::from_fn(inst.mdp.agents, a.d(), |_, _| StandardNormal.sample(&mut rng));
    let (mean, _) = exact_noise_moments(&inst, &x_probe);
    let (_, cov_star) = exact_noise_moments(&inst, &inst.truth.x_star);
    let asym = (&cov_star - cov_star.transpose()).amax();
    let cov_min = ((&cov_star + cov_star.transpose()) * 0.5).symmetric_eigenvalues().min();
    let max_reward = doc.rewards.iter().flatten().flatten().flatten().fold(0.0_f64, |acc, r| acc.max(r.abs()));
    let max_feature = (0..inst.mdp.states).map(|s| inst.features.row(s).norm()).fold(0.0, f64::max);
    let mean_ok = mean.amax() <= 1e-10 * (1.0 + x_probe.amax());
    let cov_ok = asym <= 1e-12 && cov_min >= -1e-12;
    report.push(
        "A4",
        "noise",
        if mean_ok && cov_ok {
            Ok(format!(
                "exact E[M] = {:.1e}; E[M'pi'piM] at x* symmetric PSD (min eig {:.3e}); bounded: |R| <= {max_reward:.3}, |phi| <= {max_feature:.3}",
                mean.amax(),
                cov_min
            ))
        } else {
            Err(format!("E[M] = {:e}, covariance asymmetry {asym:e}, min eig {cov_min:e}", mean.amax()))
        },
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_instance() -> TdInstance {
        TdInstance::from_doc(&two_state_instance(&[1.0], &GossipTopology::Complete).unwrap()).unwrap()
    }

    #[test]
    fn two_state_ground_truth() {
        let inst = scalar_instance();
        assert_relative_eq!(inst.truth.a.matrix()[(0, 0)], 1.375, epsilon = 1e-15);
        assert_relative_eq!(inst.truth.b[(0, 0)], 1.5, epsilon = 1e-15);
        assert_relative_eq!(inst.truth.theta_star[0], 12.0 / 11.0, epsilon = 1e-15);
        assert_relative_eq!(inst.truth.j_mu[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(inst.truth.j_mu[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(inst.chain.varphi[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn zero_rewards_give_zero_target() {
        let inst = TdInstance::from_doc(&two_state_instance(&[0.0, 0.0], &GossipTopology::Complete).unwrap()).unwrap();
        assert_eq!(inst.truth.b, DMatrix::zeros(2, 1));
        assert_eq!(inst.truth.theta_star[0], 0.0);
        assert!(inst.truth.j_mu.iter().all(|&j| j == 0.0));
    }

    #[test]
    fn myopic_values_equal_mean_rewards() {
        let mut doc = two_state_instance(&[1.0, 3.0], &GossipTopology::Complete).unwrap();
        doc.disc = 0.0;
        let inst = TdInstance::from_doc(&doc).unwrap();
        // π uniform: r̄_π = 2 everywhere
        assert_relative_eq!(inst.truth.j_mu[0], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn induce_chain_single_action_returns_kernel() {
        let doc = two_state_instance(&[1.0], &GossipTopology::Complete).unwrap();
        let (mdp, policy, _) = models_from_doc(&doc).unwrap();
        let chain = induce_chain(&mdp, &policy).unwrap();
        assert_eq!(chain.p_mu, DMatrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn periodic_chain_is_rejected() {
        let mut doc = two_state_instance(&[1.0], &GossipTopology::Complete).unwrap();
        doc.kernel = vec![vec![vec![0.0, 1.0]], vec![vec![1.0, 0.0]]];
        assert!(matches!(TdInstance::from_doc(&doc), Err(TdError::PeriodicChain { period: 2 })));
        doc.kernel = vec![vec![vec![1.0, 0.0]], vec![vec![0.5, 0.5]]];
        assert!(matches!(TdInstance::from_doc(&doc), Err(TdError::ReducibleChain { .. })));
    }

    fn spec(seed: u64) -> RandomMdpSpec {
        RandomMdpSpec {
            states: 5,
            agents: 3,
            actions_per_agent: 2,
            features: 2,
            density: 0.7,
            reward_scale: 1.0,
            disc: 0.8,
            seed,
            gossip: GossipTopology::Random,
        }
    }

    #[test]
    fn random_instances_are_deterministic_and_certified() {
        assert_eq!(random_instance(&spec(3)).unwrap(), random_instance(&spec(3)).unwrap());
        assert_ne!(random_instance(&spec(3)).unwrap(), random_instance(&spec(4)).unwrap());
        for seed in 0..20 {
            let doc = random_instance(&spec(seed)).unwrap();
            let inst = TdInstance::from_doc(&doc).unwrap();
            assert!(inst.truth.a.sym_min_eigenvalue() > 0.0);
            assert!(inst.mdp.kernel.iter().flatten().flatten().all(|&p| p > 0.0));
            let resid = (&inst.truth.theta_star * inst.truth.a.matrix() - inst.pi.as_row() * &inst.truth.b).amax();
            assert!(resid <= 1e-10);
        }
    }

    #[test]
    fn generator_rejects_bad_shapes() {
        let mut s = spec(0);
        s.features = 6;
        assert!(random_instance(&s).is_err());
        s = spec(0);
        s.agents = 5;
        s.actions_per_agent = 3;
        assert!(random_instance(&s).is_err());
    }

    #[test]
    fn projected_fixed_point_in_feature_space() {
        let inst = TdInstance::from_doc(&random_instance(&spec(9)).unwrap()).unwrap();
        let phi = inst.features.matrix();
        let d_mat = DMatrix::from_diagonal(&inst.chain.varphi.transpose());
        let v = phi * inst.truth.theta_star.transpose();
        let r_pi = (inst.pi.as_row() * mean_rewards(&inst.mdp, &inst.policy)).transpose();
        let bellman_residual = &v - r_pi - &inst.chain.p_mu * &v * inst.mdp.disc;
        let projected = phi.transpose() * d_mat * bellman_residual;
        assert!(projected.amax() < 1e-8, "{projected}");
    }

    #[test]
    fn degenerate_mdp_has_zero_noise() {
        // single state, single action: A_n = A and B_n = B always
        let doc = TdInstanceDoc {
            states: 1,
            agents: 2,
            action_counts: vec![1, 1],
            disc: 0.5,
            kernel: vec![vec![vec![1.0]]],
            rewards: vec![vec![vec![vec![1.0]]], vec![vec![vec![2.0]]]],
            policy: vec![vec![vec![1.0]]; 2],
            features: vec![vec![1.5]],
            gossip: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        };
        let inst = TdInstance::from_doc(&doc).unwrap();
        let sampler = inst.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let s = sampler.sample(&mut rng);
            assert_eq!((s.s, s.s_next), (0, 0));
            let x = DMatrix::from_fn(2, 1, |_, _| StandardNormal.sample(&mut rng));
            assert!(sampler.noise_for(&s, &x).amax() < 1e-14);
        }
    }

    #[test]
    fn deterministic_kernel_gives_unique_path() {
        let mut doc = two_state_instance(&[1.0], &GossipTopology::Complete).unwrap();
        doc.kernel = vec![vec![vec![0.0, 1.0]], vec![vec![0.5, 0.5]]];
        let inst = TdInstance::from_doc(&doc).unwrap();
        let sampler = inst.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let s = sampler.sample(&mut rng);
            if s.s == 0 {
                assert_eq!(s.s_next, 1);
            }
        }
    }

    #[test]
    fn state_frequencies_match_stationary_law() {
        let inst = TdInstance::from_doc(&random_instance(&spec(1)).unwrap()).unwrap();
        let sampler = inst.sampler();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws = 100_000;
        let mut counts = vec![0usize; inst.mdp.states];
        for _ in 0..draws {
            counts[sampler.sample(&mut rng).s] += 1;
        }
        for (s, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - inst.chain.varphi[s]).abs() <= 4.0 / (draws as f64).sqrt());
        }
    }

    #[test]
    fn noise_update_matches_per_agent_rule() {
        let inst = TdInstance::from_doc(&random_instance(&spec(2)).unwrap()).unwrap();
        let sampler = inst.sampler();
        let w = inst.mdp.gossip.entries();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let alpha = 0.37;
        for _ in 0..50 {
            let x = DMatrix::from_fn(3, 2, |_, _| StandardNormal.sample(&mut rng));
            let sample = sampler.sample(&mut rng);
            let m_next = sampler.noise_for(&sample, &x);
            let h = &inst.truth.b - &x * inst.truth.a.matrix();
            let joint = w * &x + (h + m_next) * alpha;
            let a_n = sampler.a_n(&sample);
            for i in 0..3 {
                let b_i = inst.features.row(sample.s) * sample.rewards[i];
                let gossip = w.row(i) * &x;
                let local = gossip + (b_i - x.row(i) * &a_n) * alpha;
                assert!((joint.row(i) - local).amax() < 1e-12);
            }
            // explicit (B_n - B) - x(A_n - A)
            let explicit = (sampler.b_n(&sample) - &inst.truth.b) - &x * (a_n - inst.truth.a.matrix());
            assert!((explicit - sampler.noise_for(&sample, &x)).amax() < 1e-12);
        }
    }

    #[test]
    fn assumption_report_cases() {
        let doc = random_instance(&spec(5)).unwrap();
        let inst = TdInstance::from_doc(&doc).unwrap();
        let lmin = inst.truth.a.lambda_min();
        let report = verify_assumptions(&doc, &StepsizeSchedule::type1(1.0 / lmin));
        assert!(report.all_passed(), "{}", report.text());

        let report = verify_assumptions(&doc, &StepsizeSchedule::type1(0.4 / lmin));
        assert!(!report.get("A3").unwrap().passed);
        assert!(report.get("A1").unwrap().passed);

        let mut periodic = two_state_instance(&[1.0, 2.0], &GossipTopology::Complete).unwrap();
        periodic.gossip = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let report = verify_assumptions(&periodic, &StepsizeSchedule::type_gamma(1.0, 0.7, 0.0));
        assert!(!report.get("A1").unwrap().passed);
    }

    #[test]
    fn broadcast_topology_is_not_doubly_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = GossipTopology::Broadcast { hub: 0, beta: 0.5, hub_self: 0.9 }.build(4, &mut rng).unwrap();
        assert!(!w.certificate().doubly_stochastic);
        let pi = stationary_vector(&w).unwrap();
        assert!(pi.as_row()[0] > 0.5);
    }

    #[test]
    fn instance_json_round_trip_and_hash() {
        let doc = random_instance(&spec(8)).unwrap();
        let back = TdInstanceDoc::from_json(&doc.to_json()).unwrap();
        assert_eq!(doc, back);
        assert_eq!(doc.sha256(), back.sha256());
        assert_eq!(doc.sha256().len(), 64);
    }
}
