use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    AggregateResult, AggregateRow, CovarianceSummary, ExperimentConfig, ExperimentRun, HarnessError, LilSupRow,
    Quantiles, SeedFailure, SlopeSummary, FIELDS, VERSION,
};
use crate::decomp::DecompRecord;
use crate::schedule::StepsizeSchedule;
use crate::td::{AssumptionReport, TdInstanceDoc};

pub const AGGREGATE_FILE: &str = "aggregate.csv";
pub const LIL_FILE: &str = "lil_sups.csv";
pub const METADATA_FILE: &str = "metadata.json";

pub const TRACE_COLUMNS: [&str; 12] = [
    "n",
    "alpha_n",
    "t_n",
    "lil_scale",
    "agreement",
    "disagreement",
    "total",
    "lil_ratio",
    "psi",
    "chi",
    "delta",
    "gamma",
];

/// Everything needed to reproduce a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: String,
    pub config_sha256: String,
    pub run_sha256: String,
    pub instance_sha256: String,
    pub forced: bool,
    pub config: ExperimentConfig,
    pub schedule: StepsizeSchedule,
    pub theoretical_exponents: (f64, f64),
    pub burn_in: u64,
    pub seeds: Vec<u64>,
    pub failures: Vec<SeedFailure>,
    pub slopes: SlopeSummary,
    pub assumptions: Option<AssumptionReport>,
    pub covariance: Option<CovarianceSummary>,
    pub instance: TdInstanceDoc,
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

fn csv_bytes(comment: &str, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, HarnessError> {
    let mut buf = format!("# {comment}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(|e| HarnessError::Io(e.to_string()))?;
        for r in rows {
            w.write_record(&r).map_err(|e| HarnessError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    Ok(buf)
}

pub fn trace_csv(records: &[DecompRecord], comment: &str) -> Result<Vec<u8>, HarnessError> {
    let header: Vec<String> = TRACE_COLUMNS.iter().map(|s| s.to_string()).collect();
    csv_bytes(
        comment,
        &header,
        records.iter().map(|r| {
            vec![
                r.n.to_string(),
                num(r.alpha_n),
                num(r.t_n),
                opt(r.lil_scale),
                num(r.agreement),
                num(r.disagreement),
                num(r.total),
                opt(r.lil_ratio),
                opt(r.psi),
                opt(r.chi),
                opt(r.delta),
                opt(r.gamma),
            ]
        }),
    )
}

fn aggregate_header() -> Vec<String> {
    let mut h: Vec<String> = ["n", "alpha_n", "t_n", "lil_scale"].iter().map(|s| s.to_string()).collect();
    for f in FIELDS {
        for q in ["q10", "median", "q90"] {
            h.push(format!("{f}_{q}"));
        }
    }
    h
}

pub fn aggregate_csv(agg: &AggregateResult, comment: &str) -> Result<Vec<u8>, HarnessError> {
    csv_bytes(
        comment,
        &aggregate_header(),
        agg.rows.iter().map(|r| {
            let mut row = vec![r.n.to_string(), num(r.alpha_n), num(r.t_n), opt(r.lil_scale)];
            for q in &r.stats {
                row.push(opt(q.map(|q| q.q10)));
                row.push(opt(q.map(|q| q.median)));
                row.push(opt(q.map(|q| q.q90)));
            }
            row
        }),
    )
}

pub fn lil_csv(agg: &AggregateResult, comment: &str) -> Result<Vec<u8>, HarnessError> {
    let header: Vec<String> = ["horizon", "sup_q10", "sup_median", "sup_q90"].iter().map(|s| s.to_string()).collect();
    csv_bytes(
        comment,
        &header,
        agg.lil_sups.iter().map(|l| vec![l.horizon.to_string(), num(l.q10), num(l.median), num(l.q90)]),
    )
}

/// Writes one trace per seed plus aggregate, LIL sups and metadata.
pub fn write_outputs(run: &ExperimentRun, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let config_hash = run.config.sha256();
    let run_hash = run.config.run_sha256();
    let instance_hash = run.doc.sha256();
    for t in &run.traces {
        let comment = format!("run_sha256={run_hash} instance_sha256={instance_hash} seed={} version={VERSION}", t.seed);
        let path = dir.join(format!("trace_seed_{}.csv", t.seed));
        fs::write(&path, trace_csv(&t.records, &comment)?).map_err(|e| io_err(&path, e))?;
    }
    let comment = format!("config_sha256={config_hash} instance_sha256={instance_hash} version={VERSION}");
    let path = dir.join(AGGREGATE_FILE);
    fs::write(&path, aggregate_csv(&run.aggregate, &comment)?).map_err(|e| io_err(&path, e))?;
    let path = dir.join(LIL_FILE);
    fs::write(&path, lil_csv(&run.aggregate, &comment)?).map_err(|e| io_err(&path, e))?;
    let agg = &run.aggregate;
    let meta = Metadata {
        version: VERSION.to_string(),
        config_sha256: config_hash,
        run_sha256: run_hash,
        instance_sha256: instance_hash,
        forced: run.forced,
        config: run.config.clone(),
        schedule: run.schedule,
        theoretical_exponents: run.schedule.theoretical_rate_exponents(),
        burn_in: agg.burn_in,
        seeds: agg.seeds.clone(),
        failures: agg.failures.clone(),
        slopes: agg.slopes.clone(),
        assumptions: agg.assumptions.clone(),
        covariance: agg.covariance.clone(),
        instance: run.doc.clone(),
    };
    let path = dir.join(METADATA_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| HarnessError::Io(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>, HarnessError> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(|e| io_err(path, e))
}

fn parse_opt(s: &str, path: &Path) -> Result<Option<f64>, HarnessError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|e| HarnessError::Parse(format!("{}: {s:?}: {e}", path.display())))
}

fn parse_req(s: &str, path: &Path) -> Result<f64, HarnessError> {
    parse_opt(s, path)?.ok_or_else(|| HarnessError::Parse(format!("{}: missing value", path.display())))
}

fn parse_n(s: &str, path: &Path) -> Result<u64, HarnessError> {
    s.parse().map_err(|e| HarnessError::Parse(format!("{}: {s:?}: {e}", path.display())))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<DecompRecord>, HarnessError> {
    let mut out = Vec::new();
    for rec in reader(path)?.records() {
        let r = rec.map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
        if r.len() != TRACE_COLUMNS.len() {
            return Err(HarnessError::Parse(format!("{}: expected {} columns", path.display(), TRACE_COLUMNS.len())));
        }
        out.push(DecompRecord {
            n: parse_n(&r[0], path)?,
            alpha_n: parse_req(&r[1], path)?,
            t_n: parse_req(&r[2], path)?,
            lil_scale: parse_opt(&r[3], path)?,
            agreement: parse_req(&r[4], path)?,
            disagreement: parse_req(&r[5], path)?,
            total: parse_req(&r[6], path)?,
            lil_ratio: parse_opt(&r[7], path)?,
            psi: parse_opt(&r[8], path)?,
            chi: parse_opt(&r[9], path)?,
            delta: parse_opt(&r[10], path)?,
            gamma: parse_opt(&r[11], path)?,
        });
    }
    Ok(out)
}

/// Reads a run directory back into its metadata and aggregate.
pub fn read_aggregate_dir(dir: &Path) -> Result<(Metadata, AggregateResult), HarnessError> {
    let meta_path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: Metadata =
        serde_json::from_str(&text).map_err(|e| HarnessError::Parse(format!("{}: {e}", meta_path.display())))?;

    let path = dir.join(AGGREGATE_FILE);
    let mut rd = reader(&path)?;
    let header: Vec<String> = rd.headers().map_err(|e| io_err(&path, e))?.iter().map(String::from).collect();
    if header != aggregate_header() {
        return Err(HarnessError::Parse(format!("{}: unexpected header", path.display())));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let r = rec.map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
        let mut stats = Vec::with_capacity(FIELDS.len());
        for f in 0..FIELDS.len() {
            let base = 4 + 3 * f;
            let q = match (parse_opt(&r[base], &path)?, parse_opt(&r[base + 1], &path)?, parse_opt(&r[base + 2], &path)?) {
                (Some(q10), Some(median), Some(q90)) => Some(Quantiles { q10, median, q90 }),
                _ => None,
            };
            stats.push(q);
        }
        rows.push(AggregateRow {
            n: parse_n(&r[0], &path)?,
            alpha_n: parse_req(&r[1], &path)?,
            t_n: parse_req(&r[2], &path)?,
            lil_scale: parse_opt(&r[3], &path)?,
            stats,
        });
    }

    let path = dir.join(LIL_FILE);
    let mut lil_sups = Vec::new();
    for rec in reader(&path)?.records() {
        let r = rec.map_err(|e| HarnessError::Parse(format!("{}: {e}", path.display())))?;
        lil_sups.push(LilSupRow {
            horizon: parse_n(&r[0], &path)?,
            q10: parse_req(&r[1], &path)?,
            median: parse_req(&r[2], &path)?,
            q90: parse_req(&r[3], &path)?,
        });
    }

    let agg = AggregateResult {
        schedule: meta.schedule,
        burn_in: meta.burn_in,
        seeds: meta.seeds.clone(),
        rows,
        slopes: meta.slopes.clone(),
        lil_sups,
        assumptions: meta.assumptions.clone(),
        failures: meta.failures.clone(),
        covariance: meta.covariance.clone(),
    };
    Ok((meta, agg))
}
