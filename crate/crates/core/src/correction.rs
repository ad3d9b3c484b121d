//! SES-based linear score correction and the optional emergency adjustment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ses_index::SesIndexedCohort;

#[derive(Debug, Error, PartialEq)]
pub enum CorrectionError {
    #[error("alpha must be finite and >= 0, got {0}")]
    InvalidAlpha(f64),
    #[error("mu must lie in [0, 1], got {0}")]
    InvalidMu(f64),
    #[error("SES index {0} outside [0, 1]")]
    SesOutOfRange(f64),
    #[error("emergency beta must be finite and >= 0, got {0}")]
    InvalidBeta(f64),
    #[error("emergency indicator {value} for `{id}` outside [0, 1]")]
    InvalidIndicator { id: String, value: f64 },
    #[error("emergency module bound to cycle `{sunset_cycle}` invoked for cycle `{cycle}`")]
    SunsetViolation { sunset_cycle: String, cycle: String },
    #[error("emergency indicator file: {0}")]
    IndicatorFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPolicy {
    /// Score points per unit of SES gap.
    pub alpha: f64,
    /// Distribution center; eligibility boundary for positive correction.
    pub mu: f64,
    pub clamp_nonnegative: bool,
}

impl Default for CorrectionPolicy {
    fn default() -> Self {
        Self { alpha: 10.0, mu: 0.5, clamp_nonnegative: true }
    }
}

impl CorrectionPolicy {
    pub fn new(alpha: f64, mu: f64) -> Result<Self, CorrectionError> {
        let p = Self { alpha, mu, clamp_nonnegative: true };
        p.validate()?;
        Ok(p)
    }

    pub fn with_alpha(alpha: f64) -> Result<Self, CorrectionError> {
        Self::new(alpha, 0.5)
    }

    pub fn validate(&self) -> Result<(), CorrectionError> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(CorrectionError::InvalidAlpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(CorrectionError::InvalidMu(self.mu));
        }
        Ok(())
    }

    /// Largest correction the rule can emit, reached at `s = 0`.
    pub fn max_correction(&self) -> f64 {
        self.alpha * self.mu
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    /// Correction `C_i` in score points.
    pub c: f64,
    /// Corrected score `M_i* = M_i + C_i`.
    pub m_star: f64,
}

/// `C = max(alpha * (mu - s), 0)`; the clamp is skipped only when the policy
/// disables it.
pub fn apply_correction(s: f64, merit: f64, policy: &CorrectionPolicy) -> Result<CorrectionResult, CorrectionError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(CorrectionError::SesOutOfRange(s));
    }
    let raw = policy.alpha * (policy.mu - s);
    let c = if policy.clamp_nonnegative { raw.max(0.0) } else { raw };
    Ok(CorrectionResult { c, m_star: merit + c })
}

/// Share of the cohort with `s < mu`, i.e. eligible for a positive correction.
pub fn eligibility_boundary(policy: &CorrectionPolicy, cohort: &SesIndexedCohort) -> f64 {
    if cohort.is_empty() {
        return 0.0;
    }
    let eligible = cohort.records.iter().filter(|r| r.s < policy.mu).count();
    eligible as f64 / cohort.len() as f64
}

/// Sunset-bound additive adjustment `C + beta_e * E`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergencyPolicy {
    pub beta_e: f64,
    pub indicator: BTreeMap<String, f64>,
    pub sunset_cycle: String,
}

impl EmergencyPolicy {
    pub fn new(
        beta_e: f64,
        indicator: BTreeMap<String, f64>,
        sunset_cycle: impl Into<String>,
    ) -> Result<Self, CorrectionError> {
        let p = Self { beta_e, indicator, sunset_cycle: sunset_cycle.into() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CorrectionError> {
        if !self.beta_e.is_finite() || self.beta_e < 0.0 {
            return Err(CorrectionError::InvalidBeta(self.beta_e));
        }
        for (id, &value) in &self.indicator {
            if !(0.0..=1.0).contains(&value) {
                return Err(CorrectionError::InvalidIndicator { id: id.clone(), value });
            }
        }
        Ok(())
    }

    /// Reads `id,e_value,cycle` rows. Every row must name the same cycle, which
    /// becomes the sunset cycle.
    pub fn from_csv<R: std::io::Read>(reader: R, beta_e: f64) -> Result<Self, CorrectionError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut indicator = BTreeMap::new();
        let mut cycle: Option<String> = None;
        for row in rdr.records() {
            let row = row.map_err(|e| CorrectionError::IndicatorFile(e.to_string()))?;
            let (Some(id), Some(e), Some(c)) = (row.get(0), row.get(1), row.get(2)) else {
                return Err(CorrectionError::IndicatorFile("expected columns id,e_value,cycle".into()));
            };
            let e: f64 = e
                .trim()
                .parse()
                .map_err(|_| CorrectionError::IndicatorFile(format!("bad e_value `{e}` for `{id}`")))?;
            let c = c.trim().to_string();
            match &cycle {
                None => cycle = Some(c),
                Some(prev) if *prev != c => {
                    return Err(CorrectionError::IndicatorFile(format!("mixed cycles `{prev}` and `{c}`")))
                }
                Some(_) => {}
            }
            indicator.insert(id.trim().to_string(), e);
        }
        let cycle = cycle.ok_or_else(|| CorrectionError::IndicatorFile("no rows".into()))?;
        Self::new(beta_e, indicator, cycle)
    }

    /// Binds the module to the executing cycle; fails outside the sunset cycle.
    pub fn activate(&self, cycle: &str) -> Result<ActiveEmergency, CorrectionError> {
        self.validate()?;
        if cycle != self.sunset_cycle {
            return Err(CorrectionError::SunsetViolation {
                sunset_cycle: self.sunset_cycle.clone(),
                cycle: cycle.to_string(),
            });
        }
        Ok(ActiveEmergency { policy: self.clone() })
    }

    pub fn indicator_for(&self, id: &str) -> f64 {
        self.indicator.get(id).copied().unwrap_or(0.0)
    }
}

/// An emergency policy checked against the executing cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveEmergency {
    policy: EmergencyPolicy,
}

impl ActiveEmergency {
    pub fn policy(&self) -> &EmergencyPolicy {
        &self.policy
    }
}

/// `c' = c + beta_e * e` for the named cycle.
pub fn apply_emergency(
    base: CorrectionResult,
    e: f64,
    policy: &EmergencyPolicy,
    cycle: &str,
) -> Result<CorrectionResult, CorrectionError> {
    let active = policy.activate(cycle)?;
    if !(0.0..=1.0).contains(&e) {
        return Err(CorrectionError::InvalidIndicator { id: String::new(), value: e });
    }
    Ok(active.adjust(base, e))
}

impl ActiveEmergency {
    pub fn adjust(&self, base: CorrectionResult, e: f64) -> CorrectionResult {
        let bump = self.policy.beta_e * e;
        if bump == 0.0 {
            return base;
        }
        CorrectionResult { c: base.c + bump, m_star: base.m_star + bump }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ApplicantRecord, Cohort};
    use crate::ses_index::{percentile_rank, RankMethod};

    fn p(alpha: f64) -> CorrectionPolicy {
        CorrectionPolicy::with_alpha(alpha).unwrap()
    }

    #[test]
    fn median_gets_nothing() {
        for a in [0.0, 5.0, 15.0, 100.0] {
            assert_eq!(apply_correction(0.5, 600.0, &p(a)).unwrap().c, 0.0);
        }
    }

    #[test]
    fn maximum_at_bottom() {
        assert_eq!(apply_correction(0.0, 600.0, &p(15.0)).unwrap().c, 7.5);
    }

    #[test]
    fn clamped_above_median() {
        assert_eq!(apply_correction(0.8, 600.0, &p(10.0)).unwrap().c, 0.0);
        let mut unclamped = p(10.0);
        unclamped.clamp_nonnegative = false;
        assert!((apply_correction(0.8, 600.0, &unclamped).unwrap().c + 3.0).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_example() {
        let r = apply_correction(0.2, 660.0, &p(10.0)).unwrap();
        assert!((r.c - 3.0).abs() < 1e-12);
        assert!((r.m_star - 663.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert_eq!(apply_correction(1.2, 0.0, &p(1.0)), Err(CorrectionError::SesOutOfRange(1.2)));
        assert_eq!(CorrectionPolicy::new(-1.0, 0.5), Err(CorrectionError::InvalidAlpha(-1.0)));
        assert_eq!(CorrectionPolicy::new(1.0, 1.5), Err(CorrectionError::InvalidMu(1.5)));
    }

    fn emergency(beta: f64) -> EmergencyPolicy {
        EmergencyPolicy::new(beta, BTreeMap::from([("a".to_string(), 1.0)]), "2026").unwrap()
    }

    #[test]
    fn emergency_zero_indicator_is_identity() {
        let base = CorrectionResult { c: 1.0, m_star: 601.0 };
        assert_eq!(apply_emergency(base, 0.0, &emergency(2.0), "2026").unwrap(), base);
    }

    #[test]
    fn emergency_additive() {
        let base = CorrectionResult { c: 1.0, m_star: 601.0 };
        let r = apply_emergency(base, 1.0, &emergency(2.0), "2026").unwrap();
        assert_eq!(r.c, 3.0);
        assert_eq!(r.m_star, 603.0);
    }

    #[test]
    fn emergency_outside_sunset_cycle() {
        let base = CorrectionResult { c: 1.0, m_star: 601.0 };
        let err = apply_emergency(base, 1.0, &emergency(2.0), "2027").unwrap_err();
        assert!(matches!(err, CorrectionError::SunsetViolation { .. }));
    }

    #[test]
    fn emergency_indicator_bounds() {
        let bad = EmergencyPolicy::new(1.0, BTreeMap::from([("x".to_string(), 1.5)]), "c");
        assert!(matches!(bad, Err(CorrectionError::InvalidIndicator { .. })));
    }

    #[test]
    fn emergency_csv() {
        let e = EmergencyPolicy::from_csv("id,e_value,cycle\na,1,2026\nb,0.5,2026\n".as_bytes(), 3.0).unwrap();
        assert_eq!(e.sunset_cycle, "2026");
        assert_eq!(e.indicator_for("b"), 0.5);
        assert_eq!(e.indicator_for("zz"), 0.0);
        assert!(EmergencyPolicy::from_csv("id,e_value,cycle\na,1,2026\nb,1,2027\n".as_bytes(), 1.0).is_err());
    }

    #[test]
    fn eligibility_share() {
        let records: Vec<_> = (0..10).map(|i| ApplicantRecord::new(format!("{i}"), 0.0, i as f64)).collect();
        let ix = percentile_rank(&Cohort::from_records(records, "t").unwrap(), RankMethod::Hazen).unwrap();
        assert_eq!(eligibility_boundary(&p(10.0), &ix), 0.5);
        assert_eq!(eligibility_boundary(&CorrectionPolicy::new(10.0, 0.0).unwrap(), &ix), 0.0);
        assert_eq!(eligibility_boundary(&CorrectionPolicy::new(10.0, 1.0).unwrap(), &ix), 1.0);
    }
}
