#![allow(dead_code)]

use std::collections::BTreeSet;

use amf_core::dataset::{ApplicantRecord, Cohort};
use amf_core::rng::DrawStream;
use amf_core::ses_index::SesIndexedCohort;

/// Seeded cohort with merit on a half-point grid and ESCS on a 0.01 grid, so
/// ties occur in both; roughly 15% opt out of SES disclosure.
pub fn random_cohort(seed: u64, n: usize) -> Cohort {
    let mut d = DrawStream::new(seed, 0);
    let records = (0..n)
        .map(|i| {
            let merit = ((500.0 + 100.0 * d.standard_normal()) * 2.0).round() / 2.0;
            let escs = (d.standard_normal() * 80.0).round() / 100.0;
            let optin = d.uniform() < 0.85;
            ApplicantRecord::new(format!("r{i:04}"), merit, escs).with_pre_optin(optin)
        })
        .collect();
    Cohort::from_records(records, format!("random({seed})")).unwrap()
}

/// Rank of `top_fraction * n`, halves rounded away from zero.
pub fn oracle_k(top_fraction: f64, n: usize) -> usize {
    (top_fraction * n as f64).round() as usize
}

pub fn oracle_threshold(merit: &[f64], top_fraction: f64) -> f64 {
    let mut m = merit.to_vec();
    m.sort_by(|a, b| b.total_cmp(a));
    m[oracle_k(top_fraction, m.len()) - 1]
}

pub struct OracleOutcome {
    pub t: f64,
    pub regular: BTreeSet<String>,
    /// (id, C, M*, T - M, M* - T)
    pub conditional: Vec<(String, f64, f64, f64, f64)>,
}

/// Per-record evaluation of the admission rules, with no shared code paths.
pub fn oracle_select(ix: &SesIndexedCohort, top_fraction: f64, alpha: f64, mu: f64) -> OracleOutcome {
    let merit: Vec<f64> = ix.records.iter().map(|r| r.record.merit_score).collect();
    let t = oracle_threshold(&merit, top_fraction);
    let mut regular = BTreeSet::new();
    let mut conditional = Vec::new();
    for r in &ix.records {
        let m = r.record.merit_score;
        if m >= t {
            regular.insert(r.record.id.clone());
            continue;
        }
        if !r.record.pre_optin {
            continue;
        }
        let c = (alpha * (mu - r.s)).max(0.0);
        if c > 0.0 && m + c >= t {
            conditional.push((r.record.id.clone(), c, m + c, t - m, m + c - t));
        }
    }
    conditional.sort_by(|a, b| a.0.cmp(&b.0));
    OracleOutcome { t, regular, conditional }
}
