use serde::{Deserialize, Serialize};

use super::{AggregateResult, HarnessError};
use crate::decomp::{DecompError, SlopeFit, MIN_FIT_POINTS};

/// Pass bands for fitted exponents and LIL sup growth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub agreement: f64,
    pub disagreement: f64,
    /// Band on `disagreement_slope - 2·agreement_slope`.
    pub relative: f64,
    /// Maximal relative growth of the median running sup, first to last dyadic horizon.
    pub lil_growth: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { agreement: 0.10, disagreement: 0.15, relative: 0.2, lil_growth: 0.30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub quantity: String,
    pub fitted: Option<f64>,
    pub theory: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatesReport {
    pub checks: Vec<RateCheck>,
    pub lil_trend: Vec<(u64, f64)>,
}

impl RatesReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, quantity: &str) -> Option<&RateCheck> {
        self.checks.iter().find(|c| c.quantity == quantity)
    }

    pub fn text(&self) -> String {
        let mut out = format!("{:<22} {:>10} {:>10} {:>8}  result\n", "quantity", "fitted", "theory", "tol");
        for c in &self.checks {
            let fitted = c.fitted.map_or_else(|| "n/a".to_string(), |f| format!("{f:.4}"));
            out.push_str(&format!(
                "{:<22} {:>10} {:>10.4} {:>8.3}  {}\n",
                c.quantity,
                fitted,
                c.theory,
                c.tolerance,
                if c.pass { "PASS" } else { "FAIL" }
            ));
        }
        if !self.lil_trend.is_empty() {
            out.push_str("median running LIL sup by horizon:\n");
            for (h, s) in &self.lil_trend {
                out.push_str(&format!("  {h:>10}  {s:.6}\n"));
            }
        }
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("quantity,fitted,theory,tolerance,pass\n");
        for c in &self.checks {
            out.push_str(&format!(
                "{},{},{:.16e},{:.16e},{}\n",
                c.quantity,
                c.fitted.map(|f| format!("{f:.16e}")).unwrap_or_default(),
                c.theory,
                c.tolerance,
                c.pass
            ));
        }
        out
    }
}

fn band(quantity: &str, fitted: Option<f64>, theory: f64, tolerance: f64) -> RateCheck {
    RateCheck {
        quantity: quantity.into(),
        fitted,
        theory,
        tolerance,
        pass: fitted.is_some_and(|f| (f - theory).abs() <= tolerance),
    }
}

/// Fitted against theoretical exponents, plus the LIL sup trend.
pub fn rates_report(agg: &AggregateResult, tol: &Tolerances) -> Result<RatesReport, HarnessError> {
    let post = agg.rows.iter().filter(|r| r.n >= agg.burn_in).count();
    if post < MIN_FIT_POINTS {
        return Err(DecompError::TooFewPoints { found: post, needed: MIN_FIT_POINTS }.into());
    }
    let (th_agree, th_disagree) = agg.schedule.theoretical_rate_exponents();
    let a = agg.slopes.agreement.map(|f| f.slope);
    let d = agg.slopes.disagreement.map(|f| f.slope);
    let mut checks = vec![
        band("agreement_slope", a, th_agree, tol.agreement),
        band("disagreement_slope", d, th_disagree, tol.disagreement),
        band("relative_rate", a.zip(d).map(|(a, d)| d - 2.0 * a), 0.0, tol.relative),
    ];
    let lil_trend: Vec<(u64, f64)> = agg.lil_sups.iter().map(|l| (l.horizon, l.median)).collect();
    let growth = match (lil_trend.first(), lil_trend.last()) {
        (Some(first), Some(last)) if lil_trend.len() >= 2 && first.1 > 0.0 => Some(last.1 / first.1 - 1.0),
        _ => None,
    };
    checks.push(RateCheck {
        quantity: "lil_sup_growth".into(),
        fitted: growth,
        theory: 0.0,
        tolerance: tol.lil_growth,
        pass: growth.is_some_and(|g| g < tol.lil_growth),
    });
    Ok(RatesReport { checks, lil_trend })
}

/// One plot-ready row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub ln_n: f64,
    pub ln_agreement_median: f64,
    pub ln_disagreement_median: f64,
    pub lil_ratio_median: Option<f64>,
    pub theory_agreement_line: f64,
    pub theory_disagreement_line: f64,
}

pub const PLOT_COLUMNS: &str = "ln_n,ln_agreement_median,ln_disagreement_median,lil_ratio_median,theory_agreement_line,theory_disagreement_line";

/// Theory line with the given slope through the fitted line's value at the
/// window's log-midpoint, or through `fallback` without a fit.
fn theory_line(fit: Option<&SlopeFit>, slope: f64, fallback: (f64, f64)) -> impl Fn(f64) -> f64 {
    let (x0, y0) = match fit {
        Some(f) => {
            let mid = 0.5 * ((f.window.0.max(1) as f64).ln() + (f.window.1.max(1) as f64).ln());
            (mid, f.intercept + f.slope * mid)
        }
        None => fallback,
    };
    move |x| y0 + slope * (x - x0)
}

/// Log-log medians with theory lines of the schedule's exponents.
pub fn plot_data(agg: &AggregateResult) -> Vec<PlotRow> {
    let (th_a, th_d) = agg.schedule.theoretical_rate_exponents();
    let pts: Vec<(f64, f64, f64, Option<f64>)> = agg
        .rows
        .iter()
        .filter(|r| r.n >= 1)
        .filter_map(|r| {
            let a = r.get("agreement")?.median;
            let d = r.get("disagreement")?.median;
            (a > 0.0 && d > 0.0).then(|| ((r.n as f64).ln(), a.ln(), d.ln(), r.get("lil_ratio").map(|q| q.median)))
        })
        .collect();
    let Some(first) = pts.first().copied() else {
        return Vec::new();
    };
    let agree_line = theory_line(agg.slopes.agreement.as_ref(), th_a, (first.0, first.1));
    let disagree_line = theory_line(agg.slopes.disagreement.as_ref(), th_d, (first.0, first.2));
    pts.into_iter()
        .map(|(x, a, d, lil)| PlotRow {
            ln_n: x,
            ln_agreement_median: a,
            ln_disagreement_median: d,
            lil_ratio_median: lil,
            theory_agreement_line: agree_line(x),
            theory_disagreement_line: disagree_line(x),
        })
        .collect()
}

pub fn plot_data_csv(rows: &[PlotRow]) -> String {
    let mut out = format!("{PLOT_COLUMNS}\n");
    for r in rows {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e}\n",
            r.ln_n,
            r.ln_agreement_median,
            r.ln_disagreement_median,
            r.lil_ratio_median.map(|v| format!("{v:.16e}")).unwrap_or_default(),
            r.theory_agreement_line,
            r.theory_disagreement_line
        ));
    }
    out
}
