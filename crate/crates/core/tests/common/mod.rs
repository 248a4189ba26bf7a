#![allow(dead_code)]

use dsa_lil::spectral::{drift_spectrum, DisagreementProjector, DriftMatrix, GossipMatrix, StationaryVector};
use dsa_lil::td::{GossipTopology, RandomMdpSpec};
use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// The instance used for the rate experiments: 5 states, 3 agents with two
/// actions each, 2 features.
pub fn rate_instance(gossip: GossipTopology) -> RandomMdpSpec {
    RandomMdpSpec {
        states: 5,
        agents: 3,
        actions_per_agent: 2,
        features: 2,
        density: 1.0,
        reward_scale: 1.0,
        disc: 0.8,
        seed: 1,
        gossip,
    }
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
}

/// `A = S + K` with `S` symmetric positive definite and `K` skew.
pub fn random_drift(rng: &mut ChaCha8Rng, d: usize) -> DriftMatrix {
    let g = gaussian_matrix(rng, d, d);
    let s = &g * g.transpose() / d as f64 + DMatrix::identity(d, d) * rng.random_range(0.2..1.0);
    let k = gaussian_matrix(rng, d, d) * 0.5;
    drift_spectrum(&(s + &k - k.transpose())).expect("positive definite by construction")
}

pub fn random_gossip(rng: &mut ChaCha8Rng, m: usize) -> GossipMatrix {
    GossipTopology::Random.build(m, rng).expect("random topology is certified")
}

/// `ψ_{n+1}` and `χ_{n+1}` as explicit weighted sums over the whole history,
/// with `e^{-tA}` from nalgebra's Padé exponential and `W^k` by repeated
/// multiplication.
pub fn direct_sums(
    noises: &[DMatrix<f64>],
    alphas: &[f64],
    w: &GossipMatrix,
    pi: &StationaryVector,
    q: &DisagreementProjector,
    a: &DriftMatrix,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = noises.len() - 1;
    let m = pi.len();
    let d = a.d();
    let mut t = vec![0.0; n + 2];
    for k in 0..=n {
        t[k + 1] = t[k] + alphas[k];
    }
    let ones_pi = DMatrix::from_fn(m, m, |_, j| pi.as_row()[j]);
    // powers[j] = W^j
    let mut powers = vec![DMatrix::identity(m, m)];
    for j in 1..=n {
        let next = w.entries() * &powers[j - 1];
        powers.push(next);
    }
    let mut psi = DMatrix::zeros(m, d);
    let mut chi = DMatrix::zeros(m, d);
    for k in 0..=n {
        let decay = (a.matrix() * -(t[n + 1] - t[k + 1])).exp();
        psi += &ones_pi * &noises[k] * &decay * alphas[k];
        chi += &powers[n - k] * q.matrix() * &noises[k] * &decay * alphas[k];
    }
    (psi, chi)
}
