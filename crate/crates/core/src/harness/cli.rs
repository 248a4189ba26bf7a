use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use super::{
    plot_data, rates_report, read_aggregate_dir, run_experiment, ExperimentConfig, HarnessError, ScheduleSpec,
    Tolerances,
};
use crate::decomp::{martingale_lil_test, MartingaleLilSpec, MartingaleNoise, WeightKind};
use crate::spectral::{gossip_contraction, stationary_vector, GossipMatrix};
use crate::td::{random_instance, two_state_instance, verify_assumptions, GossipTopology, RandomMdpSpec, TdInstance, TdInstanceDoc};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dsa-lil", version, about = "Distributed stochastic approximation rate and LIL experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an instance (JSON) or a gossip matrix (text) and print the report.
    Validate {
        path: PathBuf,
        /// Stepsize as JSON, e.g. '{"kind":"type_gamma","c":1,"gamma_exp":0.7}'.
        #[arg(long)]
        schedule: Option<String>,
    },
    /// Run a multi-seed experiment from a JSON config.
    Run(RunArgs),
    /// Fitted against theoretical exponents for a run directory.
    Rates { dir: PathBuf },
    /// Scalar martingale LIL simulation over several seeds.
    Mlil(MlilArgs),
    /// Generate a random policy-evaluation instance.
    GenMdp(GenArgs),
    /// Plot-ready log-log medians and theory lines for a run directory.
    PlotData {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Config file (alternative to --config).
    pub config_path: Option<PathBuf>,
    #[arg(long = "config")]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to $DSA_LIL_OUT/<config hash>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma list (`0,3,7`) or half-open range (`0..20`).
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Run even when assumption checks fail; recorded in metadata.
    #[arg(long)]
    pub force: bool,
    /// Worker threads (default: available cores).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum NoiseArg {
    Rademacher,
    Gaussian,
    Zero,
}

#[derive(Debug, Args)]
pub struct MlilArgs {
    #[arg(long, value_enum, default_value = "rademacher")]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Weights `(k+1)^-e`; unit weights when absent.
    #[arg(long)]
    pub weight_exponent: Option<f64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    #[arg(long, default_value_t = 100_000)]
    pub burn_in: u64,
    #[arg(long, default_value = "0..20")]
    pub seeds: String,
    /// Count seeds whose sup stays below this multiple of sigma.
    #[arg(long, default_value_t = 1.3)]
    pub bound: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TopologyArg {
    Random,
    Ring,
    Complete,
    Broadcast,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    #[arg(long, default_value_t = 3)]
    pub agents: usize,
    #[arg(long, default_value_t = 2)]
    pub actions: usize,
    #[arg(long, default_value_t = 2)]
    pub features: usize,
    #[arg(long, default_value_t = 1.0)]
    pub density: f64,
    #[arg(long, default_value_t = 1.0)]
    pub reward_scale: f64,
    #[arg(long, default_value_t = 0.8)]
    pub disc: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "random")]
    pub gossip: TopologyArg,
    /// The two-state reference instance with these per-agent rewards (comma list).
    #[arg(long)]
    pub two_state: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, HarnessError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse().map_err(|_| HarnessError::Parse(format!("bad list entry {s:?}"))))
        .collect()
}

/// `a..b` (half open) or a comma list; never empty.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, HarnessError> {
    let seeds: Vec<u64> = match text.split_once("..") {
        Some((a, b)) => {
            let bad = || HarnessError::Parse(format!("bad seed range {text:?}"));
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            (a..b).collect()
        }
        None => parse_list(text)?,
    };
    if seeds.is_empty() {
        return Err(HarnessError::Parse(format!("no seeds in {text:?}")));
    }
    Ok(seeds)
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn exit_code(err: &HarnessError) -> i32 {
    match err {
        HarnessError::Parse(_) => EXIT_PARSE,
        _ => EXIT_FAILURE,
    }
}

fn validate(path: &Path, schedule: Option<&str>) -> Result<i32, HarnessError> {
    let text = read(path)?;
    let looks_json = text.trim_start().starts_with('{');
    if !looks_json {
        let w: GossipMatrix = text.parse().map_err(|e: crate::spectral::SpectralError| match e {
            crate::spectral::SpectralError::Parse(msg) => HarnessError::Parse(msg),
            other => HarnessError::Config(other.to_string()),
        })?;
        print!("{}", w.report());
        let pi = stationary_vector(&w).map_err(|e| HarnessError::Config(e.to_string()))?;
        println!("stationary vector: {:?}", pi.to_vec());
        println!("second eigenvalue modulus: {:.6}", gossip_contraction(&w));
        return Ok(EXIT_OK);
    }
    let doc = TdInstanceDoc::from_json(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
    let spec: ScheduleSpec = match schedule {
        Some(s) => serde_json::from_str(s).map_err(|e| HarnessError::Parse(format!("--schedule: {e}")))?,
        None => ScheduleSpec::Type1Scaled { factor: 1.0, start_index: None },
    };
    let inst = TdInstance::from_doc(&doc);
    let sched = match &inst {
        Ok(i) => spec.resolve(&i.truth.a),
        Err(_) => spec.resolve(&crate::spectral::drift_spectrum(&nalgebra::DMatrix::identity(1, 1)).expect("identity")),
    };
    println!("instance sha256: {}", doc.sha256());
    if let Ok(i) = &inst {
        println!("theta*: {:?}", i.truth.theta_star.iter().collect::<Vec<_>>());
        println!("lambda_min(A): {:.6}", i.truth.a.lambda_min());
    }
    let report = verify_assumptions(&doc, &sched);
    print!("{}", report.text());
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn run(args: &RunArgs) -> Result<i32, HarnessError> {
    let path = args
        .config
        .as_ref()
        .or(args.config_path.as_ref())
        .ok_or_else(|| HarnessError::Parse("a config path is required".into()))?;
    let mut cfg = ExperimentConfig::from_json(&read(path)?)
        .map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if let Some(h) = args.horizon {
        cfg.horizon = h;
    }
    cfg.validate()?;
    let (run, dir) = run_experiment(&cfg, args.force, args.jobs, args.out.as_deref())?;
    let agg = &run.aggregate;
    println!("wrote {}", dir.display());
    println!("seeds completed: {} of {}", agg.seeds.len(), cfg.seeds.len());
    for f in &agg.failures {
        println!("  seed {} failed: {}", f.seed, f.error);
    }
    if let Ok(report) = rates_report(agg, &Tolerances::default()) {
        print!("{}", report.text());
    }
    Ok(EXIT_OK)
}

fn rates(dir: &Path) -> Result<i32, HarnessError> {
    let (_, agg) = read_aggregate_dir(dir)?;
    let report = rates_report(&agg, &Tolerances::default())?;
    print!("{}", report.text());
    let path = dir.join("rates.csv");
    std::fs::write(&path, report.csv()).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    Ok(EXIT_OK)
}

fn mlil(args: &MlilArgs) -> Result<i32, HarnessError> {
    let noise = match args.noise {
        NoiseArg::Rademacher => MartingaleNoise::Rademacher,
        NoiseArg::Gaussian => MartingaleNoise::Gaussian { sigma: args.sigma },
        NoiseArg::Zero => MartingaleNoise::Zero,
    };
    let weights = match args.weight_exponent {
        Some(exponent) => WeightKind::Power { exponent },
        None => WeightKind::Unit,
    };
    let seeds = parse_seeds(&args.seeds)?;
    let limit = args.bound * noise.sigma().max(f64::MIN_POSITIVE);
    let mut within = 0;
    for &seed in &seeds {
        let spec = MartingaleLilSpec { noise, weights, horizon: args.horizon, burn_in: args.burn_in, seed };
        let res = martingale_lil_test(&spec)?;
        let ok = res.sup_normalized <= limit;
        within += usize::from(ok);
        println!("seed {seed:>4}  sup {:.6}  at n = {:>9}  {}", res.sup_normalized, res.argmax_n, if ok { "ok" } else { "above" });
    }
    println!("{within} of {} seeds at or below {limit:.4}", seeds.len());
    Ok(EXIT_OK)
}

fn gen_mdp(args: &GenArgs) -> Result<i32, HarnessError> {
    let topology = match args.gossip {
        TopologyArg::Random => GossipTopology::Random,
        TopologyArg::Ring => GossipTopology::Ring { self_weight: 0.5 },
        TopologyArg::Complete => GossipTopology::Complete,
        TopologyArg::Broadcast => GossipTopology::Broadcast { hub: 0, beta: 0.5, hub_self: 0.9 },
    };
    let doc = match &args.two_state {
        Some(list) => two_state_instance(&parse_list::<f64>(list)?, &topology)?,
        None => random_instance(&RandomMdpSpec {
            states: args.states,
            agents: args.agents,
            actions_per_agent: args.actions,
            features: args.features,
            density: args.density,
            reward_scale: args.reward_scale,
            disc: args.disc,
            seed: args.seed,
            gossip: topology,
        })?,
    };
    let text = doc.to_json() + "\n";
    match &args.out {
        Some(p) => std::fs::write(p, text).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?,
        None => print!("{text}"),
    }
    Ok(EXIT_OK)
}

fn plot(dir: &Path, out: Option<&Path>) -> Result<i32, HarnessError> {
    let (_, agg) = read_aggregate_dir(dir)?;
    let csv = super::plot_data_csv(&plot_data(&agg));
    match out {
        Some(p) => std::fs::write(p, csv).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())))?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

pub fn dispatch(cli: &Cli) -> i32 {
    let result = match &cli.command {
        Command::Validate { path, schedule } => validate(path, schedule.as_deref()),
        Command::Run(args) => run(args),
        Command::Rates { dir } => rates(dir),
        Command::Mlil(args) => mlil(args),
        Command::GenMdp(args) => gen_mdp(args),
        Command::PlotData { dir, out } => plot(dir, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(argv) {
        Ok(cli) => dispatch(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_PARSE
            } else {
                EXIT_OK
            }
        }
    }
}
