//! Stepsize families and cumulative-time bookkeeping.
//!
//! Two families are supported: `α(n) = α0 / n` and the regularly varying
//! `α(n) = c n^{-γ} (ln n)^η` with `0 < γ < 1`. The iteration counter `k`
//! of a run maps to schedule index `k + start_index`, so `α_k` of a run is
//! `alpha(k + start_index)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spectral::DriftMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("schedule index {index} is before start index {start}")]
    IndexBeforeStart { index: u64, start: u64 },
    #[error("lil scale undefined: t_(n+1) = {t_next} <= 1")]
    BurnInNotReached { t_next: f64 },
    #[error("invalid schedule: {0}")]
    Invalid(String),
    #[error("type-1 coefficient alpha0 = {alpha0} must exceed 1/(2 lambda_min) = {threshold}")]
    Alpha0TooSmall { alpha0: f64, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepsizeSchedule {
    /// `α(n) = α0 / n`.
    Type1 {
        alpha0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_index: Option<u64>,
    },
    /// `α(n) = c n^{-γ} (ln n)^η`.
    TypeGamma {
        c: f64,
        gamma_exp: f64,
        #[serde(default)]
        eta: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        start_index: Option<u64>,
    },
}

impl StepsizeSchedule {
    pub fn type1(alpha0: f64) -> Self {
        StepsizeSchedule::Type1 { alpha0, start_index: None }
    }

    pub fn type_gamma(c: f64, gamma_exp: f64, eta: f64) -> Self {
        StepsizeSchedule::TypeGamma { c, gamma_exp, eta, start_index: None }
    }

    pub fn with_start_index(self, start: u64) -> Self {
        match self {
            StepsizeSchedule::Type1 { alpha0, .. } => StepsizeSchedule::Type1 { alpha0, start_index: Some(start) },
            StepsizeSchedule::TypeGamma { c, gamma_exp, eta, .. } => {
                StepsizeSchedule::TypeGamma { c, gamma_exp, eta, start_index: Some(start) }
            }
        }
    }

    /// First schedule index at which `α` is evaluated.
    ///
    /// Defaults: 1 for `α0/n` and for `η = 0`; otherwise the first integer
    /// `n ≥ 2` past `e^{η/γ}`, where `(ln n)^η` stops increasing faster than
    /// `n^{-γ}` decays.
    pub fn start_index(&self) -> u64 {
        match *self {
            StepsizeSchedule::Type1 { start_index, .. } => start_index.unwrap_or(1),
            StepsizeSchedule::TypeGamma { gamma_exp, eta, start_index, .. } => start_index.unwrap_or_else(|| {
                if eta == 0.0 {
                    1
                } else {
                    let knee = (eta / gamma_exp).exp();
                    (knee.floor() as u64 + 1).max(2)
                }
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let start = self.start_index();
        if start == 0 {
            return Err(ScheduleError::Invalid("start_index must be >= 1".into()));
        }
        match *self {
            StepsizeSchedule::Type1 { alpha0, .. } => {
                if !(alpha0 > 0.0 && alpha0.is_finite()) {
                    return Err(ScheduleError::Invalid(format!("alpha0 must be positive, got {alpha0}")));
                }
            }
            StepsizeSchedule::TypeGamma { c, gamma_exp, eta, .. } => {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(ScheduleError::Invalid(format!("c must be positive, got {c}")));
                }
                if !(gamma_exp > 0.0 && gamma_exp < 1.0) {
                    return Err(ScheduleError::Invalid(format!("gamma_exp must lie in (0,1), got {gamma_exp}")));
                }
                if !eta.is_finite() {
                    return Err(ScheduleError::Invalid("eta must be finite".into()));
                }
                if eta != 0.0 {
                    if start < 2 {
                        return Err(ScheduleError::Invalid("start_index must be >= 2 when eta != 0".into()));
                    }
                    if eta > 0.0 && (start as f64).ln() <= eta / gamma_exp {
                        return Err(ScheduleError::Invalid(format!(
                            "alpha is not decreasing at start_index {start}: need ln(start) > eta/gamma_exp"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks the `α0 > 1/(2 λ_min)` requirement for the `α0/n` family.
    pub fn check_against(&self, drift: &DriftMatrix) -> Result<(), ScheduleError> {
        self.validate()?;
        if let StepsizeSchedule::Type1 { alpha0, .. } = *self {
            let threshold = 1.0 / (2.0 * drift.lambda_min());
            if alpha0 <= threshold {
                return Err(ScheduleError::Alpha0TooSmall { alpha0, threshold });
            }
        }
        Ok(())
    }

    /// `α(index)` for a schedule index `index >= start_index`.
    pub fn alpha(&self, index: u64) -> Result<f64, ScheduleError> {
        let start = self.start_index();
        if index < start {
            return Err(ScheduleError::IndexBeforeStart { index, start });
        }
        Ok(self.alpha_unchecked(index))
    }

    /// Stepsize `α_k` used by iteration `k` of a run.
    pub fn alpha_at_step(&self, k: u64) -> f64 {
        self.alpha_unchecked(k + self.start_index())
    }

    fn alpha_unchecked(&self, index: u64) -> f64 {
        let n = index as f64;
        match *self {
            StepsizeSchedule::Type1 { alpha0, .. } => alpha0 / n,
            StepsizeSchedule::TypeGamma { c, gamma_exp, eta, .. } => {
                let base = c * n.powf(-gamma_exp);
                if eta == 0.0 {
                    base
                } else {
                    base * n.ln().powf(eta)
                }
            }
        }
    }

    /// Polynomial decay exponents of the agreement and disagreement errors,
    /// log factors ignored.
    pub fn theoretical_rate_exponents(&self) -> (f64, f64) {
        match *self {
            StepsizeSchedule::Type1 { .. } => (-0.5, -1.0),
            StepsizeSchedule::TypeGamma { gamma_exp, .. } => (-gamma_exp / 2.0, -gamma_exp),
        }
    }

    /// `t_n = Σ_{k<n} α_k`, summed directly.
    pub fn cumulative_time(&self, n: u64) -> f64 {
        (0..n).map(|k| self.alpha_at_step(k)).sum()
    }
}

/// Running `t_n = Σ_{k<n} α_k` for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAccumulator {
    n: u64,
    t_n: f64,
}

impl Default for TimeAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl TimeAccumulator {
    pub fn new() -> Self {
        TimeAccumulator { n: 0, t_n: 0.0 }
    }

    /// Accumulator positioned at step `n` with cumulative time `t_n`.
    pub fn at(n: u64, t_n: f64) -> Self {
        TimeAccumulator { n, t_n }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn t_n(&self) -> f64 {
        self.t_n
    }

    /// Adds `α_n` and moves to step `n + 1`.
    pub fn advance(&mut self, alpha_n: f64) {
        self.t_n += alpha_n;
        self.n += 1;
    }
}

/// `√(α_n ln t_{n+1})` at the accumulator's current step.
pub fn lil_scale(s: &StepsizeSchedule, acc: &TimeAccumulator) -> Result<f64, ScheduleError> {
    let alpha_n = s.alpha_at_step(acc.n());
    lil_scale_from(alpha_n, acc.t_n() + alpha_n)
}

pub fn lil_scale_from(alpha_n: f64, t_next: f64) -> Result<f64, ScheduleError> {
    if t_next.is_nan() || t_next <= 1.0 {
        return Err(ScheduleError::BurnInNotReached { t_next });
    }
    Ok((alpha_n * t_next.ln()).sqrt())
}
