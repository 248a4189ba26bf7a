//! Multi-seed orchestration, aggregation across seeds, persistence and the
//! command line front end.

mod config;
mod output;
mod report;

#[cfg(feature = "cli")]
pub mod cli;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{ExperimentConfig, InitSpec, InstanceSource, NoiseSpec, ScheduleSpec};
pub use output::{read_aggregate_dir, read_trace_csv, write_outputs, Metadata, AGGREGATE_FILE, LIL_FILE, METADATA_FILE};
pub use report::{plot_data, plot_data_csv, rates_report, PlotRow, RateCheck, RatesReport, Tolerances};

use crate::decomp::{quantile_sorted, slope_fit, DecompError, DecompRecord, SlopeFit};
use crate::engine::{run_dsa, CovarianceDecade, NoiseModel, RateTrace};
use crate::schedule::StepsizeSchedule;
use crate::td::{verify_assumptions, AssumptionReport, TdError, TdInstance, TdInstanceDoc};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Instance(#[from] TdError),
    #[error("instance fails assumption checks (rerun with --force to override)\n{0}")]
    AssumptionVeto(String),
    #[error("every seed failed")]
    AllSeedsFailed,
    #[error(transparent)]
    Decomp(#[from] DecompError),
}

/// Per-checkpoint quantiles across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

impl Quantiles {
    fn of(values: &mut [f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        values.sort_by(f64::total_cmp);
        Some(Quantiles {
            q10: quantile_sorted(values, 0.1),
            median: quantile_sorted(values, 0.5),
            q90: quantile_sorted(values, 0.9),
        })
    }
}

/// Per-checkpoint fields aggregated across seeds, in CSV column order.
pub const FIELDS: [&str; 8] = ["agreement", "disagreement", "total", "lil_ratio", "psi", "chi", "delta", "gamma"];

fn field(rec: &DecompRecord, idx: usize) -> Option<f64> {
    match idx {
        0 => Some(rec.agreement),
        1 => Some(rec.disagreement),
        2 => Some(rec.total),
        3 => rec.lil_ratio,
        4 => rec.psi,
        5 => rec.chi,
        6 => rec.delta,
        7 => rec.gamma,
        _ => unreachable!(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub n: u64,
    pub alpha_n: f64,
    pub t_n: f64,
    pub lil_scale: Option<f64>,
    /// One entry per [`FIELDS`] name.
    pub stats: Vec<Option<Quantiles>>,
}

impl AggregateRow {
    pub fn get(&self, name: &str) -> Option<Quantiles> {
        FIELDS.iter().position(|f| *f == name).and_then(|i| self.stats[i])
    }
}

/// Median (and spread) across seeds of the running LIL sup up to `horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LilSupRow {
    pub horizon: u64,
    pub q10: f64,
    pub median: f64,
    pub q90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeSummary {
    pub window: (u64, u64),
    pub agreement: Option<SlopeFit>,
    pub disagreement: Option<SlopeFit>,
    pub total: Option<SlopeFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
    pub last_checkpoint: Option<Box<DecompRecord>>,
}

/// Seed-averaged per-decade means of `(πM)'(πM)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSummary {
    pub decades: Vec<CovarianceDecade>,
    /// Relative Frobenius change between the last two complete decades.
    pub last_relative_change: Option<f64>,
    pub stabilized: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub schedule: StepsizeSchedule,
    pub burn_in: u64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
    pub slopes: SlopeSummary,
    pub lil_sups: Vec<LilSupRow>,
    pub assumptions: Option<AssumptionReport>,
    pub failures: Vec<SeedFailure>,
    pub covariance: Option<CovarianceSummary>,
}

impl AggregateResult {
    /// `(n, median)` pairs of one field.
    pub fn median_series(&self, name: &str) -> Vec<(u64, f64)> {
        self.rows.iter().filter_map(|r| r.get(name).map(|q| (r.n, q.median))).collect()
    }
}

/// Default fit window `[10^3, horizon]`, shrunk for short runs.
pub fn default_window(horizon: u64) -> (u64, u64) {
    let lo = 1000.min(horizon / 10).max(1);
    (lo, horizon)
}

/// Horizons `10^4·2^k` up to `horizon`; `[horizon]` for short runs.
pub fn dyadic_horizons(horizon: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut h = 10_000;
    while h <= horizon {
        out.push(h);
        h *= 2;
    }
    if out.is_empty() {
        out.push(horizon);
    }
    out
}

/// Running sup of `lil_ratio` over `[burn_in, horizon]` for each trace,
/// then quantiles across traces.
pub fn lil_sup_quantiles(traces: &[RateTrace], horizon: u64) -> Option<LilSupRow> {
    let mut sups: Vec<f64> = traces
        .iter()
        .filter_map(|t| {
            t.records
                .iter()
                .filter(|r| r.n >= t.burn_in && r.n <= horizon)
                .filter_map(|r| r.lil_ratio)
                .reduce(f64::max)
        })
        .collect();
    let q = Quantiles::of(&mut sups)?;
    Some(LilSupRow { horizon, q10: q.q10, median: q.median, q90: q.q90 })
}

fn covariance_summary(traces: &[RateTrace]) -> Option<CovarianceSummary> {
    let first = traces.first()?;
    if first.covariance.is_empty() {
        return None;
    }
    let mut decades = Vec::new();
    for (i, dec) in first.covariance.iter().enumerate() {
        let d = dec.mean.len();
        let mut sum = vec![vec![0.0; d]; d];
        let mut count = 0;
        for t in traces {
            let Some(other) = t.covariance.get(i) else { continue };
            for (r, row) in other.mean.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    sum[r][c] += v;
                }
            }
            count += 1;
        }
        for row in &mut sum {
            for v in row.iter_mut() {
                *v /= count as f64;
            }
        }
        decades.push(CovarianceDecade { decade: dec.decade, count: dec.count, mean: sum });
    }
    // a decade is complete when it holds 9·10^k steps
    let complete: Vec<&CovarianceDecade> =
        decades.iter().filter(|d| d.count == 9 * 10u64.pow(d.decade)).collect();
    let last_relative_change = match complete.as_slice() {
        [.., prev, last] => {
            let diff: f64 = last
                .mean
                .iter()
                .flatten()
                .zip(prev.mean.iter().flatten())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = last.mean.iter().flatten().map(|a| a * a).sum::<f64>().sqrt();
            Some(if scale > 0.0 { diff / scale } else { 0.0 })
        }
        _ => None,
    };
    Some(CovarianceSummary { decades, last_relative_change, stabilized: last_relative_change.map(|c| c < 0.05) })
}

/// Folds completed traces (in seed order) into quantiles, slopes and LIL sups.
pub fn aggregate(
    traces: &[RateTrace],
    schedule: &StepsizeSchedule,
    window: (u64, u64),
    horizon: u64,
) -> Result<AggregateResult, HarnessError> {
    let first = traces.first().ok_or(HarnessError::AllSeedsFailed)?;
    let mut rows = Vec::with_capacity(first.records.len());
    for (i, base) in first.records.iter().enumerate() {
        let stats = (0..FIELDS.len())
            .map(|f| {
                let mut vals: Vec<f64> = traces.iter().filter_map(|t| t.records.get(i)).filter_map(|r| field(r, f)).collect();
                Quantiles::of(&mut vals)
            })
            .collect();
        rows.push(AggregateRow { n: base.n, alpha_n: base.alpha_n, t_n: base.t_n, lil_scale: base.lil_scale, stats });
    }
    let fit = |name: &str| -> Option<SlopeFit> {
        let series: Vec<(u64, f64)> = rows
            .iter()
            .filter_map(|r| r.get(name).map(|q| (r.n, q.median)))
            .filter(|(_, v)| *v > 0.0)
            .collect();
        slope_fit(&series, window).ok()
    };
    let slopes = SlopeSummary {
        window,
        agreement: fit("agreement"),
        disagreement: fit("disagreement"),
        total: fit("total"),
    };
    let lil_sups = dyadic_horizons(horizon).into_iter().filter_map(|h| lil_sup_quantiles(traces, h)).collect();
    Ok(AggregateResult {
        schedule: *schedule,
        burn_in: first.burn_in,
        seeds: traces.iter().map(|t| t.seed).collect(),
        rows,
        slopes,
        lil_sups,
        assumptions: None,
        failures: Vec::new(),
        covariance: covariance_summary(traces),
    })
}

/// Everything an experiment produced, before persistence.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub doc: TdInstanceDoc,
    pub instance: TdInstance,
    pub schedule: StepsizeSchedule,
    pub forced: bool,
    pub traces: Vec<RateTrace>,
    pub aggregate: AggregateResult,
}

fn run_seed(
    cfg: &ExperimentConfig,
    inst: &TdInstance,
    noise: &NoiseModel,
    schedule: &StepsizeSchedule,
    seed: u64,
) -> Result<RateTrace, SeedFailure> {
    let init = cfg
        .init
        .build(inst.mdp.agents, inst.features.d(), seed)
        .map_err(|e| SeedFailure { seed, error: e.to_string(), last_checkpoint: None })?;
    run_dsa(&init, &inst.mdp.gossip, &inst.drive(), noise, schedule, cfg.horizon, &cfg.recorder, seed).map_err(|f| {
        SeedFailure { seed, error: f.to_string(), last_checkpoint: f.last_checkpoint }
    })
}

#[cfg(feature = "parallel")]
fn run_all(
    cfg: &ExperimentConfig,
    inst: &TdInstance,
    noise: &NoiseModel,
    schedule: &StepsizeSchedule,
    jobs: Option<usize>,
) -> Vec<Result<RateTrace, SeedFailure>> {
    use rayon::prelude::*;
    let work = || cfg.seeds.par_iter().map(|&s| run_seed(cfg, inst, noise, schedule, s)).collect();
    match jobs {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(work),
            Err(_) => work(),
        },
        None => work(),
    }
}

#[cfg(not(feature = "parallel"))]
fn run_all(
    cfg: &ExperimentConfig,
    inst: &TdInstance,
    noise: &NoiseModel,
    schedule: &StepsizeSchedule,
    _jobs: Option<usize>,
) -> Vec<Result<RateTrace, SeedFailure>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, inst, noise, schedule, s)).collect()
}

/// Runs every seed of `cfg` and aggregates. No files are written.
pub fn execute(cfg: &ExperimentConfig, force: bool, jobs: Option<usize>) -> Result<ExperimentRun, HarnessError> {
    cfg.validate()?;
    let doc = cfg.instance_doc()?;
    let instance = TdInstance::from_doc(&doc)?;
    let schedule = cfg.schedule.resolve(&instance.truth.a);
    schedule.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
    let report = verify_assumptions(&doc, &schedule);
    if !report.all_passed() && !force {
        return Err(HarnessError::AssumptionVeto(report.text()));
    }
    let noise = match &cfg.noise {
        NoiseSpec::TdSampling => NoiseModel::TdSampling(instance.sampler()),
        NoiseSpec::Zero => NoiseModel::Zero,
        NoiseSpec::Gaussian { std } => {
            if std.len() != instance.mdp.agents {
                return Err(HarnessError::Config(format!("gaussian noise needs {} std entries", instance.mdp.agents)));
            }
            NoiseModel::Gaussian { std: std.clone() }
        }
    };
    let mut traces = Vec::new();
    let mut failures = Vec::new();
    for result in run_all(cfg, &instance, &noise, &schedule, jobs) {
        match result {
            Ok(t) => traces.push(t),
            Err(f) => {
                log::warn!("seed {} excluded: {}", f.seed, f.error);
                failures.push(f);
            }
        }
    }
    let window = cfg.slope_window.unwrap_or_else(|| default_window(cfg.horizon));
    let mut aggregate = aggregate(&traces, &schedule, window, cfg.horizon)?;
    aggregate.assumptions = Some(report);
    aggregate.failures = failures;
    Ok(ExperimentRun { config: cfg.clone(), doc, instance, schedule, forced: force, traces, aggregate })
}

/// Output directory: explicit path, else `output_dir`, else
/// `$DSA_LIL_OUT/<hash>` (or `runs/<hash>`).
pub fn resolve_out_dir(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    if let Some(p) = &cfg.output_dir {
        return p.clone();
    }
    let root = std::env::var_os("DSA_LIL_OUT").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&cfg.sha256()[..12])
}

/// [`execute`] followed by [`write_outputs`].
pub fn run_experiment(
    cfg: &ExperimentConfig,
    force: bool,
    jobs: Option<usize>,
    out: Option<&Path>,
) -> Result<(ExperimentRun, PathBuf), HarnessError> {
    let run = execute(cfg, force, jobs)?;
    let dir = resolve_out_dir(cfg, out);
    write_outputs(&run, &dir)?;
    Ok((run, dir))
}
