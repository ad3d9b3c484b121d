//! Monte Carlo robustness experiments and population-weighted re-aggregation.
//!
//! Every replicate draws from its own stream (see [`crate::rng`]), replicates
//! run in parallel, and rows are collected in replicate order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::CorrectionPolicy;
use crate::dataset::Cohort;
use crate::rng::{exact_sum, DrawStream, NORMAL_METHOD, RNG_NAME};
use crate::selection::{indexed_threshold, select, KRounding, QuartileShares, SelectionError, SelectionOutcome, ThresholdSpec};
use crate::ses_index::{percentile_rank, percentiles_from_escs, Quartile, RankMethod, SesError, SesIndexedCohort};

pub const DEFAULT_REPLICATES: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum PerturbationError {
    #[error("noise SD must be finite and >= 0, got {0}")]
    InvalidSd(f64),
    #[error("variance scale must be > 0, got {0}")]
    InvalidScale(f64),
    #[error("need at least one replicate")]
    NoReplicates,
    #[error("weights must be finite and >= 0")]
    InvalidWeights,
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Ses(#[from] SesError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationKind {
    /// Gaussian noise on raw ESCS before ranking; the threshold stays put.
    SesNoise { sigma: f64 },
    /// Gaussian noise on merit; the threshold is recomputed.
    ScoreNoise { eta_sd: f64 },
    /// Rescale merit spread about its mean by `sqrt(s)`.
    VarianceScale { s: f64 },
    /// Different top fraction for the threshold.
    TopFraction { top_fraction: f64 },
    /// Additive shift of the baseline threshold.
    ThresholdPoints { points: f64 },
}

impl PerturbationKind {
    pub fn label(&self) -> String {
        match *self {
            PerturbationKind::SesNoise { sigma } => format!("ses_noise(sigma={sigma})"),
            PerturbationKind::ScoreNoise { eta_sd } => format!("score_noise(eta_sd={eta_sd})"),
            PerturbationKind::VarianceScale { s } => format!("variance_scale(s={s})"),
            PerturbationKind::TopFraction { top_fraction } => format!("threshold_top_fraction({top_fraction})"),
            PerturbationKind::ThresholdPoints { points } => format!("threshold_points({points:+})"),
        }
    }

    fn stochastic(&self) -> bool {
        matches!(self, PerturbationKind::SesNoise { .. } | PerturbationKind::ScoreNoise { .. })
    }

    fn validate(&self) -> Result<(), PerturbationError> {
        match *self {
            PerturbationKind::SesNoise { sigma: v } | PerturbationKind::ScoreNoise { eta_sd: v } => {
                if !v.is_finite() || v < 0.0 {
                    return Err(PerturbationError::InvalidSd(v));
                }
            }
            PerturbationKind::VarianceScale { s } => {
                if !s.is_finite() || s <= 0.0 {
                    return Err(PerturbationError::InvalidScale(s));
                }
            }
            PerturbationKind::TopFraction { .. } | PerturbationKind::ThresholdPoints { .. } => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    /// Ignored for deterministic kinds, which always run once.
    pub replicates: usize,
    pub base_seed: u64,
    pub alpha: f64,
    pub mu: f64,
    pub top_fraction: f64,
    pub rank_method: RankMethod,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbationKind, alpha: f64) -> Self {
        Self {
            kind,
            replicates: DEFAULT_REPLICATES,
            base_seed: 0,
            alpha,
            mu: 0.5,
            top_fraction: 0.10,
            rank_method: RankMethod::Hazen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub threshold: f64,
    pub n_conditional: usize,
    pub quartile_counts: [usize; 4],
    pub quartile_shares: QuartileShares,
    pub min_gap: Option<f64>,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_n_conditional: f64,
    pub sd_n_conditional: f64,
    /// Mean per-replicate shares over replicates with at least one admit.
    pub mean_quartile_shares: QuartileShares,
    pub frac_any_q3: f64,
    pub frac_any_q4: f64,
    pub frac_within_baseline_pm1: f64,
    pub all_gaps_nonnegative: bool,
}

impl Aggregates {
    pub fn from_rows(rows: &[ReplicateRow], baseline_n: usize) -> Aggregates {
        let n = rows.len().max(1) as f64;
        let counts: Vec<f64> = rows.iter().map(|r| r.n_conditional as f64).collect();
        let mean = counts.iter().sum::<f64>() / n;
        let sd = if rows.len() > 1 {
            (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let with_admits: Vec<&ReplicateRow> = rows.iter().filter(|r| r.n_conditional > 0).collect();
        let mut shares = [0.0; 4];
        for r in &with_admits {
            for (acc, v) in shares.iter_mut().zip(r.quartile_shares.as_array()) {
                *acc += v;
            }
        }
        let m = with_admits.len().max(1) as f64;
        let frac = |pred: &dyn Fn(&ReplicateRow) -> bool| rows.iter().filter(|r| pred(r)).count() as f64 / n;
        Aggregates {
            mean_n_conditional: mean,
            sd_n_conditional: sd,
            mean_quartile_shares: QuartileShares {
                q1: shares[0] / m,
                q2: shares[1] / m,
                q3: shares[2] / m,
                q4: shares[3] / m,
            },
            frac_any_q3: frac(&|r| r.quartile_counts[2] > 0),
            frac_any_q4: frac(&|r| r.quartile_counts[3] > 0),
            frac_within_baseline_pm1: frac(&|r| r.n_conditional.abs_diff(baseline_n) <= 1),
            all_gaps_nonnegative: rows.iter().all(|r| r.min_gap.is_none_or(|g| g >= 0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub label: String,
    pub spec: PerturbationSpec,
    pub rng: String,
    pub normal_method: String,
    pub baseline_threshold: f64,
    pub baseline_n_conditional: usize,
    pub rows: Vec<ReplicateRow>,
    pub aggregates: Aggregates,
}

impl RobustnessReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,replicate,threshold,n_conditional,q1,q2,q3,q4,min_gap\n");
        for r in &self.rows {
            let [a, b, c, d] = r.quartile_counts;
            out.push_str(&format!(
                "{},{},{},{},{a},{b},{c},{d},{}\n",
                self.label,
                r.replicate,
                r.threshold,
                r.n_conditional,
                r.min_gap.map(|g| g.to_string()).unwrap_or_default()
            ));
        }
        out
    }
}

fn row_of(replicate: usize, outcome: &SelectionOutcome) -> ReplicateRow {
    let mut counts = [0usize; 4];
    for c in &outcome.conditional {
        counts[c.quartile.index()] += 1;
    }
    ReplicateRow {
        replicate,
        threshold: outcome.threshold.t,
        n_conditional: outcome.conditional.len(),
        quartile_counts: counts,
        quartile_shares: outcome.quartile_composition,
        min_gap: outcome.conditional.iter().map(|c| c.gap).reduce(f64::min),
        ids: outcome.conditional.iter().map(|c| c.id.clone()).collect(),
    }
}

/// ESCS-noised index: percentiles re-ranked from the perturbed ESCS while each
/// record keeps the quartile of its true SES, so composition is reported
/// against true position.
pub fn ses_noised_index(base: &SesIndexedCohort, noise: &[f64], sigma: f64, method: RankMethod) -> SesIndexedCohort {
    let escs: Vec<f64> = base.records.iter().zip(noise).map(|(r, z)| r.record.escs_raw + sigma * z).collect();
    let s = percentiles_from_escs(&escs, method);
    let mut out = base.clone();
    for (r, s) in out.records.iter_mut().zip(s) {
        r.s = s;
    }
    out
}

pub fn variance_scaled(merit: &[f64], s: f64) -> Vec<f64> {
    let mean = merit.iter().sum::<f64>() / merit.len() as f64;
    let k = s.sqrt() - 1.0;
    merit.iter().map(|m| m + (m - mean) * k).collect()
}

fn one_replicate(
    spec: &PerturbationSpec,
    base: &SesIndexedCohort,
    base_threshold: &ThresholdSpec,
    policy: &CorrectionPolicy,
    replicate: usize,
) -> Result<SelectionOutcome, PerturbationError> {
    let merit: Vec<f64> = base.records.iter().map(|r| r.record.merit_score).collect();
    let draws = |n: usize| {
        let mut s = DrawStream::new(spec.base_seed, replicate as u64);
        (0..n).map(|_| s.standard_normal()).collect::<Vec<_>>()
    };
    let outcome = match spec.kind {
        PerturbationKind::SesNoise { sigma } => {
            let ix = ses_noised_index(base, &draws(base.len()), sigma, spec.rank_method);
            select(&ix, base_threshold, policy, None)?
        }
        PerturbationKind::ScoreNoise { eta_sd } => {
            let z = draws(base.len());
            let noisy: Vec<f64> = merit.iter().zip(&z).map(|(m, z)| m + eta_sd * z).collect();
            let ix = base.with_merit(&noisy);
            let t = indexed_threshold(&ix, spec.top_fraction, KRounding::default())?;
            select(&ix, &t, policy, None)?
        }
        PerturbationKind::VarianceScale { s } => {
            let ix = base.with_merit(&variance_scaled(&merit, s));
            let t = indexed_threshold(&ix, spec.top_fraction, KRounding::default())?;
            select(&ix, &t, policy, None)?
        }
        PerturbationKind::TopFraction { top_fraction } => {
            let t = indexed_threshold(base, top_fraction, KRounding::default())?;
            select(base, &t, policy, None)?
        }
        PerturbationKind::ThresholdPoints { points } => select(base, &base_threshold.shifted(points), policy, None)?,
    };
    Ok(outcome)
}

/// Runs one perturbation setting against a cleaned cohort.
pub fn run_experiment(cohort: &Cohort, spec: &PerturbationSpec) -> Result<RobustnessReport, PerturbationError> {
    spec.kind.validate()?;
    if spec.replicates == 0 {
        return Err(PerturbationError::NoReplicates);
    }
    let policy = CorrectionPolicy::new(spec.alpha, spec.mu).map_err(SelectionError::from)?;
    let base = percentile_rank(cohort, spec.rank_method)?;
    let base_threshold = indexed_threshold(&base, spec.top_fraction, KRounding::default())?;
    let baseline = select(&base, &base_threshold, &policy, None)?;
    let n_rep = if spec.kind.stochastic() { spec.replicates } else { 1 };

    let rows = (0..n_rep)
        .into_par_iter()
        .map(|r| one_replicate(spec, &base, &base_threshold, &policy, r).map(|o| row_of(r, &o)))
        .collect::<Result<Vec<_>, _>>()?;
    let aggregates = Aggregates::from_rows(&rows, baseline.n_conditional());
    Ok(RobustnessReport {
        label: spec.kind.label(),
        spec: spec.clone(),
        rng: RNG_NAME.into(),
        normal_method: NORMAL_METHOD.into(),
        baseline_threshold: base_threshold.t,
        baseline_n_conditional: baseline.n_conditional(),
        rows,
        aggregates,
    })
}

pub fn ses_noise_experiment(cohort: &Cohort, spec: &PerturbationSpec) -> Result<RobustnessReport, PerturbationError> {
    debug_assert!(matches!(spec.kind, PerturbationKind::SesNoise { .. }));
    run_experiment(cohort, spec)
}

pub fn score_noise_experiment(cohort: &Cohort, spec: &PerturbationSpec) -> Result<RobustnessReport, PerturbationError> {
    debug_assert!(matches!(spec.kind, PerturbationKind::ScoreNoise { .. }));
    run_experiment(cohort, spec)
}

pub fn variance_scale_experiment(cohort: &Cohort, spec: &PerturbationSpec) -> Result<RobustnessReport, PerturbationError> {
    debug_assert!(matches!(spec.kind, PerturbationKind::VarianceScale { .. }));
    run_experiment(cohort, spec)
}

pub fn threshold_shift_experiment(cohort: &Cohort, spec: &PerturbationSpec) -> Result<RobustnessReport, PerturbationError> {
    debug_assert!(matches!(spec.kind, PerturbationKind::TopFraction { .. } | PerturbationKind::ThresholdPoints { .. }));
    run_experiment(cohort, spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedReport {
    pub alpha: f64,
    pub n_conditional: usize,
    pub weighted_n_conditional: f64,
    pub weighted_quartile_shares: QuartileShares,
    /// Smallest admit SES at which cumulative weight reaches half the total.
    pub weighted_median_s: Option<f64>,
    pub weighted_bottom_half_share: f64,
    pub total_weight: f64,
}

/// Selection stays per-applicant; only the aggregates carry weights.
pub fn weighted_estimates(
    cohort: &SesIndexedCohort,
    threshold: &ThresholdSpec,
    policy: &CorrectionPolicy,
) -> Result<WeightedReport, PerturbationError> {
    if cohort.records.iter().any(|r| !r.record.weight.is_finite() || r.record.weight < 0.0) {
        return Err(PerturbationError::InvalidWeights);
    }
    let outcome = select(cohort, threshold, policy, None)?;
    let weight_of: std::collections::HashMap<&str, f64> =
        cohort.records.iter().map(|r| (r.record.id.as_str(), r.record.weight)).collect();
    let admits: Vec<(f64, Quartile, f64)> =
        outcome.conditional.iter().map(|c| (c.s, c.quartile, weight_of[c.id.as_str()])).collect();

    let total = exact_sum(admits.iter().map(|a| a.2));
    let by_q = |q: Quartile| exact_sum(admits.iter().filter(|a| a.1 == q).map(|a| a.2));
    let counts = [by_q(Quartile::Q1), by_q(Quartile::Q2), by_q(Quartile::Q3), by_q(Quartile::Q4)];
    let shares = QuartileShares::from_counts(counts);

    let mut sorted = admits.clone();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut median = None;
    for (s, _, w) in &sorted {
        acc += w;
        if acc >= total / 2.0 {
            median = Some(*s);
            break;
        }
    }
    Ok(WeightedReport {
        alpha: policy.alpha,
        n_conditional: outcome.n_conditional(),
        weighted_n_conditional: total,
        weighted_quartile_shares: shares,
        weighted_median_s: if admits.is_empty() { None } else { median },
        weighted_bottom_half_share: if total > 0.0 { exact_sum([counts[0], counts[1]]) / total } else { 0.0 },
        total_weight: exact_sum(cohort.records.iter().map(|r| r.record.weight)),
    })
}
