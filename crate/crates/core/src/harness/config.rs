use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::engine::RecorderSpec;
use crate::schedule::StepsizeSchedule;
use crate::spectral::{matrix_from_rows, DriftMatrix};
use crate::td::{random_instance, two_state_instance, GossipTopology, RandomMdpSpec, TdInstanceDoc};

/// Where the policy-evaluation instance comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InstanceSource {
    Generate(RandomMdpSpec),
    File { path: PathBuf },
    Inline { doc: Box<TdInstanceDoc> },
    /// The two-state reference instance with one constant reward per agent.
    TwoState { rewards: Vec<f64> },
}

/// Stepsize family; `type1_scaled` sets `α0 = factor / λ_min` once `A` is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleSpec {
    Type1 {
        alpha0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_index: Option<u64>,
    },
    Type1Scaled {
        factor: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_index: Option<u64>,
    },
    TypeGamma {
        c: f64,
        gamma_exp: f64,
        #[serde(default)]
        eta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_index: Option<u64>,
    },
}

impl ScheduleSpec {
    pub fn resolve(&self, drift: &DriftMatrix) -> StepsizeSchedule {
        let (schedule, start) = match *self {
            ScheduleSpec::Type1 { alpha0, start_index } => (StepsizeSchedule::type1(alpha0), start_index),
            ScheduleSpec::Type1Scaled { factor, start_index } => {
                (StepsizeSchedule::type1(factor / drift.lambda_min()), start_index)
            }
            ScheduleSpec::TypeGamma { c, gamma_exp, eta, start_index } => {
                (StepsizeSchedule::type_gamma(c, gamma_exp, eta), start_index)
            }
        };
        match start {
            Some(s) => schedule.with_start_index(s),
            None => schedule,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Fresh i.i.d. transitions from the instance.
    TdSampling,
    Zero,
    Gaussian { std: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitSpec {
    Zeros,
    /// I.i.d. `N(0, scale²)` entries drawn from `seed` mixed with the run seed.
    Gaussian { scale: f64, seed: u64 },
    Matrix { rows: Vec<Vec<f64>> },
}

impl InitSpec {
    pub fn build(&self, m: usize, d: usize, run_seed: u64) -> Result<DMatrix<f64>, HarnessError> {
        match self {
            InitSpec::Zeros => Ok(DMatrix::zeros(m, d)),
            InitSpec::Gaussian { scale, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ run_seed.rotate_left(32));
                Ok(DMatrix::from_fn(m, d, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                }))
            }
            InitSpec::Matrix { rows } => {
                let x = matrix_from_rows(rows).map_err(|e| HarnessError::Config(format!("init matrix: {e}")))?;
                if x.shape() != (m, d) {
                    return Err(HarnessError::Config(format!("init matrix is {:?}, expected ({m}, {d})", x.shape())));
                }
                Ok(x)
            }
        }
    }
}

fn default_noise() -> NoiseSpec {
    NoiseSpec::TdSampling
}

fn default_init() -> InitSpec {
    InitSpec::Zeros
}

/// A complete, serializable description of a multi-seed experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub instance: InstanceSource,
    /// Replaces the instance's gossip matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gossip: Option<GossipTopology>,
    pub schedule: ScheduleSpec,
    pub horizon: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_noise")]
    pub noise: NoiseSpec,
    #[serde(default = "default_init")]
    pub init: InitSpec,
    /// Diagnostics toggles, checkpoint ratio and burn-in override.
    #[serde(default)]
    pub recorder: RecorderSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slope_window: Option<(u64, u64)>,
    /// Excluded from every hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| HarnessError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.horizon == 0 {
            return Err(HarnessError::Config("horizon must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Config("at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(HarnessError::Config("seeds must be distinct".into()));
        }
        if let Some(b) = self.recorder.burn_in {
            if b > self.horizon {
                return Err(HarnessError::Config(format!("burn-in {b} exceeds horizon {}", self.horizon)));
            }
        }
        if let Some((lo, hi)) = self.slope_window {
            if lo >= hi {
                return Err(HarnessError::Config(format!("slope window ({lo}, {hi}) is empty")));
            }
        }
        if self.recorder.ratio.is_nan() || self.recorder.ratio <= 1.0 {
            return Err(HarnessError::Config("checkpoint ratio must exceed 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the compact JSON form without `output_dir`.
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        digest(&serde_json::to_string(&c).expect("config serialization"))
    }

    /// Hash shared by every seed of this experiment: the config without
    /// `seeds` and `output_dir`. Embedded in per-seed trace files.
    pub fn run_sha256(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.seeds.clear();
        digest(&serde_json::to_string(&c).expect("config serialization"))
    }

    /// Loads or generates the instance document and applies the gossip override.
    pub fn instance_doc(&self) -> Result<TdInstanceDoc, HarnessError> {
        let mut doc = match &self.instance {
            InstanceSource::Generate(spec) => random_instance(spec)?,
            InstanceSource::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
                TdInstanceDoc::from_json(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?
            }
            InstanceSource::Inline { doc } => (**doc).clone(),
            InstanceSource::TwoState { rewards } => two_state_instance(rewards, &GossipTopology::Complete)?,
        };
        if let Some(topology) = &self.gossip {
            let seed = match &self.instance {
                InstanceSource::Generate(spec) => spec.seed,
                _ => 0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6055_1b00);
            let w = topology.build(doc.agents, &mut rng).map_err(crate::td::TdError::Gossip)?;
            doc.gossip = w.to_rows();
        }
        Ok(doc)
    }
}

pub(crate) fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            instance: InstanceSource::TwoState { rewards: vec![1.0, 2.0] },
            gossip: Some(GossipTopology::Ring { self_weight: 0.5 }),
            schedule: ScheduleSpec::TypeGamma { c: 1.0, gamma_exp: 0.7, eta: 0.0, start_index: None },
            horizon: 1000,
            seeds: vec![0, 1, 2],
            noise: NoiseSpec::TdSampling,
            init: InitSpec::Gaussian { scale: 0.5, seed: 9 },
            recorder: RecorderSpec::default(),
            slope_window: Some((100, 1000)),
            output_dir: Some("out".into()),
        }
    }

    #[test]
    fn config_round_trips() {
        let cfg = sample();
        assert_eq!(ExperimentConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn hashes_ignore_output_dir_and_run_hash_ignores_seeds() {
        let a = sample();
        let mut b = sample();
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.sha256(), b.sha256());
        b.seeds = vec![0, 2];
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.run_sha256(), b.run_sha256());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = sample();
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = sample();
        c.horizon = 0;
        assert!(c.validate().is_err());
        let mut c = sample();
        c.recorder.burn_in = Some(5000);
        assert!(c.validate().is_err());
        assert!(matches!(ExperimentConfig::from_json("{\"horizon\": 3"), Err(HarnessError::Parse(_))));
    }
}
