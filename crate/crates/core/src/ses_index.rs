//! Percentile-normalized SES index and population quartiles.

use std::fmt;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ApplicantRecord, Cohort};

#[derive(Debug, Error, PartialEq)]
pub enum SesError {
    #[error("cannot rank an empty cohort")]
    EmptyCohort,
    #[error("reference distribution is empty")]
    EmptyReference,
    #[error("SES index {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("reference value is not finite")]
    NonFiniteReference,
    #[error("unreadable reference file: {0}")]
    Unreadable(String),
}

/// Percentile-rank convention. Both use mid-ranks for ties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMethod {
    /// `(r - 0.5) / N`; the mean over an untied cohort is exactly 0.5.
    #[default]
    Hazen,
    /// `r / N`.
    Inclusive,
}

impl RankMethod {
    pub const ALL: [RankMethod; 2] = [RankMethod::Hazen, RankMethod::Inclusive];

    pub fn name(self) -> &'static str {
        match self {
            RankMethod::Hazen => "hazen",
            RankMethod::Inclusive => "inclusive",
        }
    }
}

impl fmt::Display for RankMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RankMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hazen" => Ok(RankMethod::Hazen),
            "inclusive" => Ok(RankMethod::Inclusive),
            other => Err(format!("unknown rank method `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Quartile {
    Q1,
    Q2,
    Q3,
    Q4,
}

impl Quartile {
    pub const ALL: [Quartile; 4] = [Quartile::Q1, Quartile::Q2, Quartile::Q3, Quartile::Q4];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn bottom_half(self) -> bool {
        matches!(self, Quartile::Q1 | Quartile::Q2)
    }
}

impl fmt::Display for Quartile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.index() + 1)
    }
}

/// Q1 `[0, .25)`, Q2 `[.25, .5)`, Q3 `[.5, .75)`, Q4 `[.75, 1]`.
pub fn assign_quartile(s: f64) -> Result<Quartile, SesError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(SesError::OutOfRange(s));
    }
    Ok(if s < 0.25 {
        Quartile::Q1
    } else if s < 0.5 {
        Quartile::Q2
    } else if s < 0.75 {
        Quartile::Q3
    } else {
        Quartile::Q4
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Ranked within the cohort itself.
    #[serde(rename = "self")]
    SelfRanked,
    /// Ranked against an external (national) reference sample.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedRecord {
    pub record: ApplicantRecord,
    pub s: f64,
    pub quartile: Quartile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SesIndexedCohort {
    pub records: Vec<IndexedRecord>,
    pub rank_method: RankMethod,
    pub reference: Reference,
}

impl SesIndexedCohort {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn mean_s(&self) -> f64 {
        self.records.iter().map(|r| r.s).sum::<f64>() / self.records.len() as f64
    }

    /// Same indexed cohort with merit scores replaced, SES untouched.
    pub fn with_merit(&self, merit: &[f64]) -> SesIndexedCohort {
        assert_eq!(merit.len(), self.records.len());
        let mut out = self.clone();
        for (r, &m) in out.records.iter_mut().zip(merit) {
            r.record.merit_score = m;
        }
        out
    }

    pub fn to_cohort(&self) -> Cohort {
        Cohort {
            records: self.records.iter().map(|r| r.record.clone()).collect(),
            provenance: String::new(),
            n_dropped_missing: 0,
        }
    }
}

/// Mid-ranks (1-based, ties averaged) of `values`, in input order.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) share ranks i+1..=j
        let rank = (i + 1 + j) as f64 / 2.0;
        for &ix in &order[i..j] {
            ranks[ix] = rank;
        }
        i = j;
    }
    ranks
}

/// Percentile ranks of raw ESCS within the cohort.
pub fn percentile_rank(cohort: &Cohort, method: RankMethod) -> Result<SesIndexedCohort, SesError> {
    if cohort.is_empty() {
        return Err(SesError::EmptyCohort);
    }
    let escs = cohort.escs_values();
    let s = percentiles_from_escs(&escs, method);
    index_with(cohort, &s, method, Reference::SelfRanked)
}

/// Percentile ranks of an arbitrary ESCS vector (used for perturbed ESCS).
pub fn percentiles_from_escs(escs: &[f64], method: RankMethod) -> Vec<f64> {
    let n = escs.len() as f64;
    mid_ranks(escs)
        .into_iter()
        .map(|r| match method {
            RankMethod::Hazen => (r - 0.5) / n,
            RankMethod::Inclusive => r / n,
        })
        .collect()
}

fn index_with(
    cohort: &Cohort,
    s: &[f64],
    rank_method: RankMethod,
    reference: Reference,
) -> Result<SesIndexedCohort, SesError> {
    let records = cohort
        .records
        .iter()
        .zip(s)
        .map(|(r, &s)| Ok(IndexedRecord { record: r.clone(), s, quartile: assign_quartile(s)? }))
        .collect::<Result<Vec<_>, SesError>>()?;
    Ok(SesIndexedCohort { records, rank_method, reference })
}

/// Sorted national reference sample for percentile anchoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    sorted_escs: Vec<f64>,
    pub description: String,
}

impl ReferenceDistribution {
    pub fn new(mut values: Vec<f64>, description: impl Into<String>) -> Result<Self, SesError> {
        if values.is_empty() {
            return Err(SesError::EmptyReference);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(SesError::NonFiniteReference);
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { sorted_escs: values, description: description.into() })
    }

    /// One-column CSV. A non-numeric first line is treated as a header;
    /// blank lines are skipped.
    pub fn from_csv<R: Read>(mut reader: R, description: &str) -> Result<Self, SesError> {
        let mut text = String::new();
        reader.read_to_string(&mut text).map_err(|e| SesError::Unreadable(e.to_string()))?;
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let field = line.split([',', '\t']).next().unwrap_or("").trim();
            if field.is_empty() {
                continue;
            }
            match field.parse::<f64>() {
                Ok(v) => values.push(v),
                Err(_) if i == 0 => continue,
                Err(e) => return Err(SesError::Unreadable(format!("line {}: {e}", i + 1))),
            }
        }
        Self::new(values, description)
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted_escs
    }

    /// Mid-distribution percentile of `x`: share strictly below plus half the
    /// share equal.
    pub fn percentile_of(&self, x: f64) -> f64 {
        let below = self.sorted_escs.partition_point(|&v| v < x);
        let through = self.sorted_escs.partition_point(|&v| v <= x);
        let n = self.sorted_escs.len() as f64;
        (below as f64 + 0.5 * (through - below) as f64) / n
    }
}

/// Percentiles of each applicant's raw ESCS relative to an external reference.
pub fn reanchor_percentiles(cohort: &Cohort, reference: &ReferenceDistribution) -> Result<SesIndexedCohort, SesError> {
    if cohort.is_empty() {
        return Err(SesError::EmptyCohort);
    }
    let s: Vec<f64> = cohort.records.iter().map(|r| reference.percentile_of(r.escs_raw)).collect();
    index_with(cohort, &s, RankMethod::Hazen, Reference::External)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(escs: &[f64]) -> Cohort {
        Cohort::from_records(
            escs.iter().enumerate().map(|(i, &e)| ApplicantRecord::new(format!("{i}"), 500.0, e)).collect(),
            "t",
        )
        .unwrap()
    }

    fn s_of(c: &SesIndexedCohort) -> Vec<f64> {
        c.records.iter().map(|r| r.s).collect()
    }

    #[test]
    fn hazen_five_distinct() {
        let c = percentile_rank(&cohort(&[3.0, 1.0, 5.0, 2.0, 4.0]), RankMethod::Hazen).unwrap();
        let s = s_of(&c);
        let expect = [0.5, 0.1, 0.9, 0.3, 0.7];
        for (a, b) in s.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((c.mean_s() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hazen_ties_get_mid_rank() {
        let c = percentile_rank(&cohort(&[1.0, 2.0, 2.0, 4.0]), RankMethod::Hazen).unwrap();
        assert_eq!(s_of(&c), vec![0.125, 0.5, 0.5, 0.875]);
    }

    #[test]
    fn inclusive_top_is_one() {
        let c = percentile_rank(&cohort(&[1.0, 2.0, 3.0, 4.0]), RankMethod::Inclusive).unwrap();
        assert_eq!(s_of(&c), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.records[3].quartile, Quartile::Q4);
    }

    #[test]
    fn quartile_boundaries() {
        assert_eq!(assign_quartile(0.10).unwrap(), Quartile::Q1);
        assert_eq!(assign_quartile(0.25).unwrap(), Quartile::Q2);
        assert_eq!(assign_quartile(0.4999).unwrap(), Quartile::Q2);
        assert_eq!(assign_quartile(0.5).unwrap(), Quartile::Q3);
        assert_eq!(assign_quartile(0.75).unwrap(), Quartile::Q4);
        assert_eq!(assign_quartile(1.00).unwrap(), Quartile::Q4);
        assert_eq!(assign_quartile(0.0).unwrap(), Quartile::Q1);
        assert_eq!(assign_quartile(1.01), Err(SesError::OutOfRange(1.01)));
        assert!(assign_quartile(-0.01).is_err());
        assert!(assign_quartile(f64::NAN).is_err());
    }

    #[test]
    fn empty_cohort_rejected() {
        let c = Cohort { records: vec![], provenance: String::new(), n_dropped_missing: 0 };
        assert_eq!(percentile_rank(&c, RankMethod::Hazen), Err(SesError::EmptyCohort));
    }

    #[test]
    fn reanchor_mid_distribution() {
        let reference = ReferenceDistribution::new((0..100).map(f64::from).collect(), "0..99").unwrap();
        assert_eq!(reference.percentile_of(50.0), 0.505);
        assert_eq!(reference.percentile_of(-1.0), 0.0);
        assert_eq!(reference.percentile_of(1000.0), 1.0);
    }

    #[test]
    fn national_anchor_differs_from_pool_rank() {
        // National reference: 1000 evenly spaced values. The pool sits entirely
        // above the 55th national percentile.
        let national: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let reference = ReferenceDistribution::new(national, "national").unwrap();
        let pool: Vec<f64> = (0..10).map(|i| 0.5995 + i as f64 * 0.04).collect();
        let c = cohort(&pool);
        let anchored = reanchor_percentiles(&c, &reference).unwrap();
        assert!((anchored.records[0].s - 0.60).abs() < 1e-9);
        assert_eq!(anchored.reference, Reference::External);
        let pooled = percentile_rank(&c, RankMethod::Hazen).unwrap();
        assert!((pooled.records[0].s - 0.05).abs() < 1e-12);
    }

    #[test]
    fn self_reference_matches_hazen_without_ties() {
        let escs = [0.3, -1.2, 2.2, 0.9, 0.0, -0.4];
        let c = cohort(&escs);
        let reference = ReferenceDistribution::new(escs.to_vec(), "self").unwrap();
        let a = reanchor_percentiles(&c, &reference).unwrap();
        let b = percentile_rank(&c, RankMethod::Hazen).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.s - y.s).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_csv_with_header() {
        let r = ReferenceDistribution::from_csv("ESCS\n0.5\n-0.5\n\n1.5\n".as_bytes(), "f").unwrap();
        assert_eq!(r.sorted(), &[-0.5, 0.5, 1.5]);
        assert_eq!(ReferenceDistribution::from_csv("ESCS\n".as_bytes(), "f"), Err(SesError::EmptyReference));
    }
}
