use dsa_lil::decomp::{martingale_lil_test, MartingaleLilSpec};
use dsa_lil::engine::RecorderSpec;
use dsa_lil::harness::{execute, ExperimentConfig, InitSpec, InstanceSource, NoiseSpec, ScheduleSpec};
use dsa_lil::spectral::{gossip_contraction, parse_matrix_text, stationary_vector, validate_gossip};
use dsa_lil::td::{GossipTopology, RandomMdpSpec};
use serde::Deserialize;
use serde_json::{json, Value};

/// Browser-side limits; a tab should not hang for minutes.
pub const MAX_RATE_HORIZON: u64 = 500_000;
pub const MAX_RATE_SEEDS: u64 = 16;
pub const MAX_LIL_HORIZON: u64 = 5_000_000;

pub fn analyze_gossip(text: &str) -> Result<Value, String> {
    let entries = parse_matrix_text(text).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<f64>> = entries.row_iter().map(|r| r.iter().copied().collect()).collect();
    let col_sums: Vec<f64> = entries.column_iter().map(|c| c.sum()).collect();
    let doubly = col_sums.iter().all(|s| (s - 1.0).abs() < 1e-9);
    match validate_gossip(&entries) {
        Ok(w) => {
            let pi = stationary_vector(&w).map_err(|e| e.to_string())?;
            Ok(json!({
                "valid": true,
                "m": w.m(),
                "rows": rows,
                "column_sums": col_sums,
                "doubly_stochastic": doubly,
                "pi": pi.to_vec(),
                "contraction": gossip_contraction(&w),
                "report": w.report(),
            }))
        }
        Err(e) => Ok(json!({
            "valid": false,
            "m": entries.nrows(),
            "rows": rows,
            "column_sums": col_sums,
            "doubly_stochastic": doubly,
            "reason": e.to_string(),
        })),
    }
}

/// Parameters of [`simulate_rates`]. The instance is fixed: 5 states,
/// 3 agents with two actions, 2 features, discount 0.8.
#[derive(Debug, Clone, Deserialize)]
pub struct RateParams {
    #[serde(default = "default_topology")]
    pub topology: GossipTopology,
    #[serde(default = "default_gamma")]
    pub gamma_exp: f64,
    #[serde(default = "default_horizon")]
    pub horizon: u64,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_instance_seed")]
    pub instance_seed: u64,
}

fn default_topology() -> GossipTopology {
    GossipTopology::Random
}

fn default_gamma() -> f64 {
    0.7
}

fn default_horizon() -> u64 {
    100_000
}

fn default_seeds() -> u64 {
    8
}

fn default_instance_seed() -> u64 {
    1
}

fn rate_config(p: &RateParams) -> ExperimentConfig {
    ExperimentConfig {
        instance: InstanceSource::Generate(RandomMdpSpec {
            states: 5,
            agents: 3,
            actions_per_agent: 2,
            features: 2,
            density: 1.0,
            reward_scale: 1.0,
            disc: 0.8,
            seed: p.instance_seed,
            gossip: GossipTopology::Random,
        }),
        gossip: Some(p.topology.clone()),
        schedule: ScheduleSpec::TypeGamma { c: 1.0, gamma_exp: p.gamma_exp, eta: 0.0, start_index: None },
        horizon: p.horizon,
        seeds: (0..p.seeds).collect(),
        noise: NoiseSpec::TdSampling,
        init: InitSpec::Zeros,
        recorder: RecorderSpec::default(),
        slope_window: None,
        output_dir: None,
    }
}

pub fn simulate_rates(params: &str) -> Result<Value, String> {
    let p: RateParams = serde_json::from_str(params).map_err(|e| format!("parameters: {e}"))?;
    if p.horizon > MAX_RATE_HORIZON {
        return Err(format!("horizon is capped at {MAX_RATE_HORIZON} in the browser"));
    }
    if p.seeds == 0 || p.seeds > MAX_RATE_SEEDS {
        return Err(format!("seeds must be between 1 and {MAX_RATE_SEEDS}"));
    }
    let run = execute(&rate_config(&p), false, None).map_err(|e| e.to_string())?;
    let agg = &run.aggregate;
    let series = |name: &str| {
        let rows: Vec<Value> = agg
            .rows
            .iter()
            .filter(|r| r.n >= 1)
            .filter_map(|r| r.get(name).map(|q| json!([r.n, q.q10, q.median, q.q90])))
            .collect();
        Value::Array(rows)
    };
    let (th_a, th_d) = run.schedule.theoretical_rate_exponents();
    let slope = |f: &Option<dsa_lil::decomp::SlopeFit>| f.as_ref().map(|f| json!({ "slope": f.slope, "intercept": f.intercept }));
    Ok(json!({
        "theta_star": run.instance.truth.theta_star.iter().collect::<Vec<_>>(),
        "pi": run.instance.pi.to_vec(),
        "lambda_min": run.instance.truth.a.lambda_min(),
        "burn_in": agg.burn_in,
        "window": agg.slopes.window,
        "agreement": series("agreement"),
        "disagreement": series("disagreement"),
        "lil_ratio": series("lil_ratio"),
        "slopes": {
            "agreement": slope(&agg.slopes.agreement),
            "disagreement": slope(&agg.slopes.disagreement),
        },
        "theory": { "agreement": th_a, "disagreement": th_d },
        "lil_sups": agg.lil_sups.iter().map(|l| json!([l.horizon, l.q10, l.median, l.q90])).collect::<Vec<_>>(),
        "failed_seeds": agg.failures.iter().map(|f| f.seed).collect::<Vec<_>>(),
    }))
}

pub fn martingale_lil(spec: &str) -> Result<Value, String> {
    let spec: MartingaleLilSpec = serde_json::from_str(spec).map_err(|e| format!("parameters: {e}"))?;
    if spec.horizon > MAX_LIL_HORIZON {
        return Err(format!("horizon is capped at {MAX_LIL_HORIZON} in the browser"));
    }
    let res = martingale_lil_test(&spec).map_err(|e| e.to_string())?;
    serde_json::to_value(&res).map_err(|e| e.to_string())
}
