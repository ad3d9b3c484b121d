//! SES gradient, alpha calibration table, trade-off curves and feasibility.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::CorrectionPolicy;
use crate::dataset::Cohort;
use crate::selection::{indexed_threshold, select, KRounding, QuartileShares, SelectionError};
use crate::ses_index::SesIndexedCohort;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("need at least 3 records for a gradient, got {0}")]
    TooFewRecords(usize),
    #[error("ESCS has zero variance")]
    DegenerateVariance,
    #[error("trade-off grid is empty")]
    EmptyGrid,
    #[error("feasibility bound `{0}` must be finite and >= 0")]
    NegativeBound(&'static str),
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientEstimate {
    /// Score points per ESCS unit.
    pub beta_gradient: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub sigma_escs: f64,
    /// Score points per ESCS standard deviation.
    pub delta_per_sd: f64,
    pub with_intercept: bool,
    pub n: usize,
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r_squared)`.
///
/// Without an intercept the line is forced through the origin and `r_squared`
/// is the uncentered form `1 - SSR / sum(y^2)`.
pub fn linear_fit(x: &[f64], y: &[f64], with_intercept: bool) -> Option<(f64, f64, f64)> {
    let n = x.len() as f64;
    if x.len() != y.len() || x.is_empty() {
        return None;
    }
    let (slope, intercept) = if with_intercept {
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        (slope, my - slope * mx)
    } else {
        let sxx: f64 = x.iter().map(|v| v * v).sum();
        if sxx == 0.0 {
            return None;
        }
        (x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / sxx, 0.0)
    };
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let sst: f64 = if with_intercept {
        let my = y.iter().sum::<f64>() / n;
        y.iter().map(|b| (b - my).powi(2)).sum()
    } else {
        y.iter().map(|b| b * b).sum()
    };
    let r2 = if sst == 0.0 { 1.0 } else { (1.0 - ssr / sst).clamp(0.0, 1.0) };
    Some((slope, intercept, r2))
}

/// OLS of merit on raw ESCS. `sigma_escs` is the sample SD (n - 1).
pub fn ses_gradient(cohort: &Cohort, with_intercept: bool) -> Result<GradientEstimate, CalibrationError> {
    let n = cohort.len();
    if n < 3 {
        return Err(CalibrationError::TooFewRecords(n));
    }
    let x = cohort.escs_values();
    let y = cohort.merit_scores();
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    if var <= 0.0 {
        return Err(CalibrationError::DegenerateVariance);
    }
    let (beta, intercept, r2) = linear_fit(&x, &y, with_intercept).ok_or(CalibrationError::DegenerateVariance)?;
    let sigma = var.sqrt();
    Ok(GradientEstimate {
        beta_gradient: beta,
        intercept,
        r_squared: r2,
        sigma_escs: sigma,
        delta_per_sd: beta * sigma,
        with_intercept,
        n,
    })
}

/// How the SES-effect fraction is turned into a whole percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PercentRounding {
    #[default]
    Nearest,
    Floor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub alpha: f64,
    pub max_correction: f64,
    /// Exact ratio `max_correction / delta_per_sd`.
    pub fraction_of_ses_effect: f64,
    pub fraction_percent: u32,
}

pub fn calibration_table(alphas: &[f64], gradient: &GradientEstimate, rounding: PercentRounding) -> Vec<CalibrationRow> {
    alphas
        .iter()
        .map(|&alpha| {
            let max_correction = 0.5 * alpha;
            let fraction = if gradient.delta_per_sd == 0.0 { 0.0 } else { max_correction / gradient.delta_per_sd };
            let pct = fraction * 100.0;
            let pct = match rounding {
                PercentRounding::Nearest => pct.round(),
                PercentRounding::Floor => pct.floor(),
            };
            CalibrationRow {
                alpha,
                max_correction,
                fraction_of_ses_effect: fraction,
                fraction_percent: pct.max(0.0) as u32,
            }
        })
        .collect()
}

/// Per-student subsidy that applies within an alpha range (inclusive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportBand {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub subsidy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityBounds {
    pub capacity_seats: usize,
    pub budget_total: f64,
    pub per_student_cost: f64,
    #[serde(default)]
    pub support_schedule: Vec<SupportBand>,
}

impl FeasibilityBounds {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        if !self.budget_total.is_finite() || self.budget_total < 0.0 {
            return Err(CalibrationError::NegativeBound("budget_total"));
        }
        if !self.per_student_cost.is_finite() || self.per_student_cost < 0.0 {
            return Err(CalibrationError::NegativeBound("per_student_cost"));
        }
        for band in &self.support_schedule {
            if !band.subsidy.is_finite() || band.subsidy < 0.0 {
                return Err(CalibrationError::NegativeBound("support_schedule.subsidy"));
            }
        }
        Ok(())
    }

    pub fn subsidy_for(&self, alpha: f64) -> Option<f64> {
        self.support_schedule
            .iter()
            .find(|b| alpha >= b.alpha_min && alpha <= b.alpha_max)
            .map(|b| b.subsidy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub n_conditional: usize,
    pub mean_c: Option<f64>,
    pub quartile_shares: QuartileShares,
    pub projected_cost: Option<f64>,
    pub support_subsidy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub top_fraction: f64,
    pub threshold: f64,
    pub points: Vec<CurvePoint>,
    /// Least-squares line of count on alpha; `None` when fewer than two distinct alphas.
    pub fit: Option<LineFit>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Runs selection at every alpha and summarizes. `base` supplies mu and the
/// clamp setting; its alpha is replaced per point. Output is sorted by alpha.
pub fn tradeoff_curve(
    cohort: &SesIndexedCohort,
    alpha_grid: &[f64],
    top_fraction: f64,
    base: &CorrectionPolicy,
    bounds: Option<&FeasibilityBounds>,
) -> Result<TradeoffCurve, CalibrationError> {
    if alpha_grid.is_empty() {
        return Err(CalibrationError::EmptyGrid);
    }
    let threshold = indexed_threshold(cohort, top_fraction, KRounding::default())?;
    let mut points = alpha_grid
        .par_iter()
        .map(|&alpha| {
            let policy = CorrectionPolicy { alpha, ..*base };
            let out = select(cohort, &threshold, &policy, None)?;
            let summary = out.summary();
            Ok(CurvePoint {
                alpha,
                n_conditional: out.n_conditional(),
                mean_c: summary.correction.mean,
                quartile_shares: out.quartile_composition,
                projected_cost: bounds.map(|b| out.n_conditional() as f64 * b.per_student_cost),
                support_subsidy: bounds.and_then(|b| b.subsidy_for(alpha)),
            })
        })
        .collect::<Result<Vec<_>, SelectionError>>()?;
    points.sort_by(|a, b| a.alpha.total_cmp(&b.alpha));
    let xs: Vec<f64> = points.iter().map(|p| p.alpha).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.n_conditional as f64).collect();
    let fit = linear_fit(&xs, &ys, true).map(|(slope, intercept, r_squared)| LineFit { slope, intercept, r_squared });
    Ok(TradeoffCurve { top_fraction, threshold: threshold.t, points, fit })
}

/// Alphas whose projected admits fit both seats and budget.
pub fn feasible_alpha(curve: &TradeoffCurve, bounds: &FeasibilityBounds) -> Vec<f64> {
    curve
        .points
        .iter()
        .filter(|p| {
            p.n_conditional <= bounds.capacity_seats
                && p.n_conditional as f64 * bounds.per_student_cost <= bounds.budget_total
        })
        .map(|p| p.alpha)
        .collect()
}

pub fn curve_csv(curve: &TradeoffCurve) -> String {
    let mut out = String::from("alpha,n_conditional,mean_c,q1,q2,q3,q4,projected_cost,support_subsidy\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for p in &curve.points {
        let q = p.quartile_shares;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            p.alpha,
            p.n_conditional,
            opt(p.mean_c),
            q.q1,
            q.q2,
            q.q3,
            q.q4,
            opt(p.projected_cost),
            opt(p.support_subsidy)
        ));
    }
    out
}
