mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use dsa_lil::decomp::DecompRecord;
use dsa_lil::engine::{checkpoints, RateTrace, RecorderSpec};
use dsa_lil::harness::{
    aggregate, execute, plot_data, rates_report, read_aggregate_dir, read_trace_csv, run_experiment, ExperimentConfig,
    HarnessError, InitSpec, InstanceSource, NoiseSpec, ScheduleSpec, Tolerances, FIELDS,
};
use dsa_lil::schedule::StepsizeSchedule;
use dsa_lil::td::GossipTopology;
use nalgebra::DMatrix;

use common::rate_instance;

fn config(seeds: Vec<u64>, horizon: u64, noise: NoiseSpec) -> ExperimentConfig {
    ExperimentConfig {
        instance: InstanceSource::Generate(rate_instance(GossipTopology::Random)),
        gossip: None,
        schedule: ScheduleSpec::TypeGamma { c: 1.0, gamma_exp: 0.7, eta: 0.0, start_index: None },
        horizon,
        seeds,
        noise,
        init: InitSpec::Gaussian { scale: 0.5, seed: 9 },
        recorder: RecorderSpec { psi: true, chi: true, delta: true, gamma: true, ..RecorderSpec::default() },
        slope_window: None,
        output_dir: None,
    }
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn field(r: &DecompRecord, name: &str) -> Option<f64> {
    match name {
        "agreement" => Some(r.agreement),
        "disagreement" => Some(r.disagreement),
        "total" => Some(r.total),
        "lil_ratio" => r.lil_ratio,
        "psi" => r.psi,
        "chi" => r.chi,
        "delta" => r.delta,
        "gamma" => r.gamma,
        other => panic!("unknown field {other}"),
    }
}

#[test]
fn single_noise_free_seed_aggregates_to_its_trace() {
    let run = execute(&config(vec![4], 1000, NoiseSpec::Zero), false, Some(1)).unwrap();
    let trace = &run.traces[0];
    assert_eq!(run.aggregate.rows.len(), trace.records.len());
    for (row, rec) in run.aggregate.rows.iter().zip(&trace.records) {
        assert_eq!(row.n, rec.n);
        for name in FIELDS {
            match (row.get(name), field(rec, name)) {
                (Some(q), Some(v)) => assert!(q.q10 == v && q.median == v && q.q90 == v, "{name} at {}", rec.n),
                (None, None) => {}
                other => panic!("{name} at {}: {other:?}", rec.n),
            }
        }
    }
}

#[test]
fn outputs_are_byte_identical_and_reproducible_from_metadata() {
    let cfg = config(vec![0, 1, 2], 5000, NoiseSpec::TdSampling);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run_experiment(&cfg, false, Some(3), Some(&a)).unwrap();
    run_experiment(&cfg, false, Some(1), Some(&b)).unwrap();
    let first = files(&a);
    assert_eq!(first.len(), 3 + 3);
    assert_eq!(first, files(&b));

    let (meta, _) = read_aggregate_dir(&a).unwrap();
    assert_eq!(meta.config, cfg);
    run_experiment(&meta.config, meta.forced, None, Some(&c)).unwrap();
    assert_eq!(first, files(&c));

    let instance_tag = format!("instance_sha256={}", meta.instance_sha256);
    for (name, bytes) in &first {
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert!(text.contains(&meta.instance_sha256), "{name} lacks the instance hash");
        let config_tag = if name.starts_with("trace_seed_") { &meta.run_sha256 } else { &meta.config_sha256 };
        assert!(text.contains(config_tag.as_str()), "{name} lacks the config hash");
        if name.ends_with(".csv") {
            assert!(text.lines().next().unwrap().contains(&instance_tag));
        }
    }
}

#[test]
fn dropping_a_seed_leaves_other_traces_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let (full, partial) = (tmp.path().join("full"), tmp.path().join("partial"));
    run_experiment(&config(vec![0, 1, 2], 3000, NoiseSpec::TdSampling), false, None, Some(&full)).unwrap();
    run_experiment(&config(vec![0, 2], 3000, NoiseSpec::TdSampling), false, None, Some(&partial)).unwrap();
    let (f, p) = (files(&full), files(&partial));
    assert_eq!(f["trace_seed_0.csv"], p["trace_seed_0.csv"]);
    assert_eq!(f["trace_seed_2.csv"], p["trace_seed_2.csv"]);
    assert!(!p.contains_key("trace_seed_1.csv"));
    assert_ne!(f["aggregate.csv"], p["aggregate.csv"]);
}

#[test]
fn trace_files_round_trip_exactly() {
    let cfg = config(vec![6], 2000, NoiseSpec::TdSampling);
    let tmp = tempfile::tempdir().unwrap();
    let (run, dir) = run_experiment(&cfg, false, None, Some(tmp.path())).unwrap();
    let back = read_trace_csv(&dir.join("trace_seed_6.csv")).unwrap();
    assert_eq!(back, run.traces[0].records);
    let (_, agg) = read_aggregate_dir(&dir).unwrap();
    assert_eq!(agg.rows, run.aggregate.rows);
    assert_eq!(agg.lil_sups, run.aggregate.lil_sups);
}

#[test]
fn quantiles_are_ordered_at_every_checkpoint() {
    let run = execute(&config((0..12).collect(), 20_000, NoiseSpec::TdSampling), false, None).unwrap();
    for row in &run.aggregate.rows {
        for name in FIELDS {
            if let Some(q) = row.get(name) {
                assert!(q.q10 <= q.median && q.median <= q.q90, "{name} at {}: {q:?}", row.n);
            }
        }
    }
    for l in &run.aggregate.lil_sups {
        assert!(l.q10 <= l.median && l.median <= l.q90);
    }
}

#[test]
fn failed_assumptions_veto_unless_forced() {
    let mut cfg = config(vec![0], 500, NoiseSpec::TdSampling);
    cfg.schedule = ScheduleSpec::Type1Scaled { factor: 0.4, start_index: None };
    match execute(&cfg, false, None) {
        Err(HarnessError::AssumptionVeto(text)) => assert!(text.contains("A3")),
        other => panic!("expected a veto, got {other:?}"),
    }
    let tmp = tempfile::tempdir().unwrap();
    let (run, dir) = run_experiment(&cfg, true, None, Some(tmp.path())).unwrap();
    assert!(run.forced);
    let (meta, _) = read_aggregate_dir(&dir).unwrap();
    assert!(meta.forced);
    assert!(!meta.assumptions.unwrap().all_passed());
}

#[test]
fn divergent_seeds_are_excluded_not_fatal() {
    // initial iterates near the divergence bound: the first step pushes some seeds past it
    let mut cfg = config((0..8).collect(), 500, NoiseSpec::TdSampling);
    cfg.init = InitSpec::Gaussian { scale: 3.5e11, seed: 1 };
    let run = execute(&cfg, false, None).unwrap();
    let agg = &run.aggregate;
    assert!(!agg.failures.is_empty() && !agg.seeds.is_empty());
    assert_eq!(agg.seeds.len() + agg.failures.len(), 8);
    for f in &agg.failures {
        assert!(!agg.seeds.contains(&f.seed));
        assert!(f.error.contains("non-finite"), "{}", f.error);
    }

    cfg.schedule = ScheduleSpec::Type1 { alpha0: 1e7, start_index: None };
    cfg.init = InitSpec::Zeros;
    match execute(&cfg, true, None) {
        Err(HarnessError::AllSeedsFailed) => {}
        other => panic!("expected every seed to diverge, got {other:?}"),
    }
}

fn synthetic_traces(agree_exp: f64, disagree_exp: f64) -> Vec<RateTrace> {
    (0..3)
        .map(|seed| {
            let wiggle = 1.0 + 0.1 * seed as f64;
            let records = checkpoints(1_000_000, 1.05, 100)
                .into_iter()
                .filter(|&n| n >= 1)
                .map(|n| {
                    let x = n as f64;
                    let a = wiggle * x.powf(agree_exp);
                    let d = wiggle * x.powf(disagree_exp);
                    DecompRecord {
                        n,
                        alpha_n: 1.0 / x,
                        t_n: x.ln(),
                        lil_scale: Some(1.0),
                        agreement: a,
                        disagreement: d,
                        total: a + d,
                        lil_ratio: Some(wiggle),
                        psi: None,
                        chi: None,
                        delta: None,
                        gamma: None,
                    }
                })
                .collect();
            RateTrace { seed, burn_in: 100, records, final_x: DMatrix::zeros(1, 1), covariance: Vec::new() }
        })
        .collect()
}

#[test]
fn rates_report_passes_exact_theoretical_decay() {
    let s = StepsizeSchedule::type_gamma(1.0, 0.7, 0.0);
    let agg = aggregate(&synthetic_traces(-0.35, -0.7), &s, (1000, 1_000_000), 1_000_000).unwrap();
    let report = rates_report(&agg, &Tolerances::default()).unwrap();
    let agree = report.check("agreement_slope").unwrap();
    assert!((agree.fitted.unwrap() + 0.35).abs() < 1e-12);
    assert_eq!(agree.theory, -0.35);
    assert!(report.all_passed(), "{}", report.text());
    assert!(report.csv().lines().count() >= 5);
}

#[test]
fn rates_report_flags_slow_decay() {
    let s = StepsizeSchedule::type_gamma(1.0, 0.7, 0.0);
    let agg = aggregate(&synthetic_traces(-0.1, -0.7), &s, (1000, 1_000_000), 1_000_000).unwrap();
    let report = rates_report(&agg, &Tolerances::default()).unwrap();
    assert!(!report.check("agreement_slope").unwrap().pass);
    assert!(!report.all_passed());
    assert!(report.text().contains("FAIL"));
}

#[test]
fn rates_report_needs_enough_checkpoints() {
    let run = execute(&config(vec![0], 5, NoiseSpec::TdSampling), false, None).unwrap();
    assert!(rates_report(&run.aggregate, &Tolerances::default()).is_err());
}

#[test]
fn theory_lines_carry_the_schedule_exponents() {
    let s = StepsizeSchedule::type_gamma(1.0, 0.7, 0.0);
    let agg = aggregate(&synthetic_traces(-0.3, -0.8), &s, (1000, 1_000_000), 1_000_000).unwrap();
    let rows = plot_data(&agg);
    let (first, last) = (rows.first().unwrap(), rows.last().unwrap());
    let run = last.ln_n - first.ln_n;
    assert!(((last.theory_agreement_line - first.theory_agreement_line) / run + 0.35).abs() < 1e-12);
    assert!(((last.theory_disagreement_line - first.theory_disagreement_line) / run + 0.7).abs() < 1e-12);
}

#[test]
fn twenty_seed_td_run_fills_the_slopes_in_budget() {
    let start = Instant::now();
    let run = execute(&config((0..20).collect(), 100_000, NoiseSpec::TdSampling), false, None).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert_eq!(run.aggregate.seeds.len(), 20);
    let slopes = &run.aggregate.slopes;
    assert!(slopes.agreement.is_some() && slopes.disagreement.is_some() && slopes.total.is_some());
    assert!(elapsed < 300.0, "took {elapsed:.1}s");
}
