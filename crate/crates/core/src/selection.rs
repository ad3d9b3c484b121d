//! Order-statistic merit threshold, dual selection and vacancy fill.
//!
//! Regular admits are decided on raw merit alone (`M >= T`). Conditional
//! admits are the opted-in applicants below `T` whose corrected score reaches
//! it. Conditional admits are never capped here; capacity is a feasibility
//! check on alpha (see [`crate::calibration::feasible_alpha`]).

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::{apply_correction, ActiveEmergency, CorrectionError, CorrectionPolicy};
use crate::dataset::Cohort;
use crate::ses_index::{Quartile, SesIndexedCohort};

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("top fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("threshold rank k = {k} is outside 1..={n}")]
    InvalidRank { k: usize, n: usize },
    #[error("cannot compute a threshold on an empty cohort")]
    EmptyCohort,
    #[error("threshold was computed on a different record set")]
    ThresholdMismatch,
    #[error("capacity event references unknown applicant `{0}`")]
    UnknownId(String),
    #[error("applicant `{0}` already withdrew")]
    AlreadyWithdrawn(String),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
}

/// How `top_fraction * N` is turned into a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KRounding {
    #[default]
    HalfAwayFromZero,
    Floor,
    Ceil,
}

impl KRounding {
    fn apply(self, x: f64) -> f64 {
        match self {
            KRounding::HalfAwayFromZero => x.round(),
            KRounding::Floor => x.floor(),
            KRounding::Ceil => x.ceil(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub top_fraction: f64,
    pub k: usize,
    /// Merit threshold `T`, the k-th largest raw score plus any additive shift.
    pub t: f64,
    pub n: usize,
    pub rounding: KRounding,
    /// Additive shift applied after the order statistic; 0 for a plain threshold.
    pub shift: f64,
    /// Digest of the (id, merit) sequence the threshold was computed from.
    pub fingerprint: String,
}

impl ThresholdSpec {
    pub fn shifted(&self, points: f64) -> ThresholdSpec {
        ThresholdSpec { t: self.t + points, shift: self.shift + points, ..self.clone() }
    }
}

fn fingerprint<'a>(rows: impl Iterator<Item = (&'a str, f64)>) -> String {
    let mut h = Sha256::new();
    for (id, m) in rows {
        h.update((id.len() as u64).to_le_bytes());
        h.update(id.as_bytes());
        h.update(m.to_bits().to_le_bytes());
    }
    hex::encode(&h.finalize()[..16])
}

pub fn cohort_fingerprint(cohort: &Cohort) -> String {
    fingerprint(cohort.records.iter().map(|r| (r.id.as_str(), r.merit_score)))
}

pub fn indexed_fingerprint(cohort: &SesIndexedCohort) -> String {
    fingerprint(cohort.records.iter().map(|r| (r.record.id.as_str(), r.record.merit_score)))
}

/// k-th largest raw merit, `k = round(top_fraction * N)`.
pub fn merit_threshold(cohort: &Cohort, top_fraction: f64) -> Result<ThresholdSpec, SelectionError> {
    merit_threshold_with(cohort, top_fraction, KRounding::default())
}

pub fn merit_threshold_with(
    cohort: &Cohort,
    top_fraction: f64,
    rounding: KRounding,
) -> Result<ThresholdSpec, SelectionError> {
    let merit = cohort.merit_scores();
    let (k, t) = order_statistic(&merit, top_fraction, rounding)?;
    Ok(ThresholdSpec {
        top_fraction,
        k,
        t,
        n: merit.len(),
        rounding,
        shift: 0.0,
        fingerprint: cohort_fingerprint(cohort),
    })
}

/// Threshold on an indexed cohort (whose merit may have been perturbed).
pub fn indexed_threshold(
    cohort: &SesIndexedCohort,
    top_fraction: f64,
    rounding: KRounding,
) -> Result<ThresholdSpec, SelectionError> {
    let merit: Vec<f64> = cohort.records.iter().map(|r| r.record.merit_score).collect();
    let (k, t) = order_statistic(&merit, top_fraction, rounding)?;
    Ok(ThresholdSpec {
        top_fraction,
        k,
        t,
        n: merit.len(),
        rounding,
        shift: 0.0,
        fingerprint: indexed_fingerprint(cohort),
    })
}

fn order_statistic(merit: &[f64], top_fraction: f64, rounding: KRounding) -> Result<(usize, f64), SelectionError> {
    if merit.is_empty() {
        return Err(SelectionError::EmptyCohort);
    }
    if !(top_fraction > 0.0 && top_fraction < 1.0) {
        return Err(SelectionError::InvalidFraction(top_fraction));
    }
    let n = merit.len();
    let k = rounding.apply(top_fraction * n as f64) as usize;
    if k == 0 || k > n {
        return Err(SelectionError::InvalidRank { k, n });
    }
    let mut sorted = merit.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok((k, sorted[k - 1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularAdmit {
    pub id: String,
    pub merit: f64,
    pub s: f64,
    pub quartile: Quartile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAdmit {
    pub id: String,
    pub merit: f64,
    pub s: f64,
    pub quartile: Quartile,
    pub c: f64,
    pub m_star: f64,
    /// Raw distance below the threshold, `T - M`.
    pub delta: f64,
    /// Corrected exceedance, `M* - T`.
    pub gap: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QuartileShares {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

impl QuartileShares {
    pub fn from_counts(counts: [f64; 4]) -> Self {
        let total: f64 = counts.iter().sum();
        if total <= 0.0 {
            return Self::default();
        }
        Self { q1: counts[0] / total, q2: counts[1] / total, q3: counts[2] / total, q4: counts[3] / total }
    }

    pub fn of<'a>(quartiles: impl Iterator<Item = &'a Quartile>) -> Self {
        let mut counts = [0.0; 4];
        for q in quartiles {
            counts[q.index()] += 1.0;
        }
        Self::from_counts(counts)
    }

    pub fn get(&self, q: Quartile) -> f64 {
        self.as_array()[q.index()]
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.q1, self.q2, self.q3, self.q4]
    }

    pub fn bottom_half(&self) -> f64 {
        1.0 - (self.q3 + self.q4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub threshold: ThresholdSpec,
    pub policy: CorrectionPolicy,
    pub regular: Vec<RegularAdmit>,
    pub conditional: Vec<ConditionalAdmit>,
    pub quartile_composition: QuartileShares,
    /// Every applicant ordered by corrected score, then raw score, then id.
    pub ranking: Vec<String>,
    pub cohort_size: usize,
}

impl SelectionOutcome {
    pub fn regular_ids(&self) -> BTreeSet<&str> {
        self.regular.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn conditional_ids(&self) -> BTreeSet<&str> {
        self.conditional.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn n_conditional(&self) -> usize {
        self.conditional.len()
    }

    pub fn summary(&self) -> SelectionSummary {
        let c: Vec<f64> = self.conditional.iter().map(|a| a.c).collect();
        let gap: Vec<f64> = self.conditional.iter().map(|a| a.gap).collect();
        let delta: Vec<f64> = self.conditional.iter().map(|a| a.delta).collect();
        SelectionSummary {
            cohort_size: self.cohort_size,
            threshold: self.threshold.t,
            k: self.threshold.k,
            top_fraction: self.threshold.top_fraction,
            alpha: self.policy.alpha,
            mu: self.policy.mu,
            n_regular: self.regular.len(),
            n_conditional: self.conditional.len(),
            share_of_cohort: self.conditional.len() as f64 / self.cohort_size as f64,
            quartile_composition: self.quartile_composition,
            correction: Stats::of(&c),
            gap: Stats::of(&gap),
            delta: Stats::of(&delta),
        }
    }
}

/// min / max / mean / sample SD; all `None` for an empty sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub n: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Stats {
        if xs.is_empty() {
            return Stats::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 {
            Some((xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
        } else {
            None
        };
        Stats {
            n: xs.len(),
            min: xs.iter().copied().reduce(f64::min),
            max: xs.iter().copied().reduce(f64::max),
            mean: Some(mean),
            sd,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub cohort_size: usize,
    pub threshold: f64,
    pub k: usize,
    pub top_fraction: f64,
    pub alpha: f64,
    pub mu: f64,
    pub n_regular: usize,
    pub n_conditional: usize,
    pub share_of_cohort: f64,
    pub quartile_composition: QuartileShares,
    pub correction: Stats,
    pub gap: Stats,
    pub delta: Stats,
}

/// Runs dual selection against a threshold computed on the same records.
pub fn select(
    cohort: &SesIndexedCohort,
    threshold: &ThresholdSpec,
    policy: &CorrectionPolicy,
    emergency: Option<&ActiveEmergency>,
) -> Result<SelectionOutcome, SelectionError> {
    if cohort.len() != threshold.n || indexed_fingerprint(cohort) != threshold.fingerprint {
        return Err(SelectionError::ThresholdMismatch);
    }
    policy.validate()?;
    let t = threshold.t;
    let mut regular = Vec::new();
    let mut conditional = Vec::new();
    let mut keyed: Vec<(f64, f64, &str)> = Vec::with_capacity(cohort.len());

    for ix in &cohort.records {
        let r = &ix.record;
        let mut corr = if r.pre_optin {
            apply_correction(ix.s, r.merit_score, policy)?
        } else {
            crate::correction::CorrectionResult { c: 0.0, m_star: r.merit_score }
        };
        if let Some(em) = emergency {
            corr = em.adjust(corr, em.policy().indicator_for(&r.id));
        }
        keyed.push((corr.m_star, r.merit_score, r.id.as_str()));

        if r.merit_score >= t {
            regular.push(RegularAdmit { id: r.id.clone(), merit: r.merit_score, s: ix.s, quartile: ix.quartile });
        } else if corr.m_star >= t && corr.c > 0.0 {
            conditional.push(ConditionalAdmit {
                id: r.id.clone(),
                merit: r.merit_score,
                s: ix.s,
                quartile: ix.quartile,
                c: corr.c,
                m_star: corr.m_star,
                delta: t - r.merit_score,
                gap: corr.m_star - t,
            });
        }
    }

    conditional.sort_by(|a, b| {
        b.m_star.total_cmp(&a.m_star).then(b.merit.total_cmp(&a.merit)).then_with(|| a.id.cmp(&b.id))
    });
    regular.sort_by(|a, b| b.merit.total_cmp(&a.merit).then_with(|| a.id.cmp(&b.id)));
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)).then_with(|| a.2.cmp(b.2)));
    let quartile_composition = QuartileShares::of(conditional.iter().map(|c| &c.quartile));

    Ok(SelectionOutcome {
        threshold: threshold.clone(),
        policy: *policy,
        regular,
        conditional,
        quartile_composition,
        ranking: keyed.into_iter().map(|(_, _, id)| id.to_string()).collect(),
        cohort_size: cohort.len(),
    })
}

/// Outcome CSV: `id,role,M,S,C,M_star,delta,gap,quartile`.
pub fn outcome_csv(outcome: &SelectionOutcome) -> String {
    let mut out = String::from("id,role,M,S,C,M_star,delta,gap,quartile\n");
    for r in &outcome.regular {
        out.push_str(&format!("{},regular,{},{},0,{},,,{}\n", r.id, r.merit, r.s, r.merit, r.quartile));
    }
    for c in &outcome.conditional {
        out.push_str(&format!(
            "{},conditional,{},{},{},{},{},{},{}\n",
            c.id, c.merit, c.s, c.c, c.m_star, c.delta, c.gap, c.quartile
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityEvent {
    Withdraw(String),
    AddSeat,
}

/// Offers made down a frozen ranking as seats open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VacancyLedger {
    pub capacity_events: Vec<CapacityEvent>,
    pub offers_made: Vec<String>,
    /// Seats that opened after the ranking was exhausted.
    pub unfilled: usize,
    ranking: Vec<String>,
    holders: HashSet<String>,
    withdrawn: HashSet<String>,
    offered: HashSet<String>,
    cursor: usize,
}

impl VacancyLedger {
    /// Freezes `ranking`; the admitted set of `outcome` holds the initial seats.
    pub fn open(outcome: &SelectionOutcome, ranking: &[String]) -> Self {
        let holders = outcome
            .regular
            .iter()
            .map(|r| r.id.clone())
            .chain(outcome.conditional.iter().map(|c| c.id.clone()))
            .collect();
        Self {
            capacity_events: Vec::new(),
            offers_made: Vec::new(),
            unfilled: 0,
            ranking: ranking.to_vec(),
            holders,
            withdrawn: HashSet::new(),
            offered: HashSet::new(),
            cursor: 0,
        }
    }

    /// Applies events in order. Validation happens first, so a rejected batch
    /// leaves the ledger untouched.
    pub fn apply(&mut self, events: &[CapacityEvent]) -> Result<(), SelectionError> {
        let known: HashMap<&str, ()> = self.ranking.iter().map(|id| (id.as_str(), ())).collect();
        let mut pending_withdrawals = HashSet::new();
        for ev in events {
            if let CapacityEvent::Withdraw(id) = ev {
                if !known.contains_key(id.as_str()) {
                    return Err(SelectionError::UnknownId(id.clone()));
                }
                if self.withdrawn.contains(id) || !pending_withdrawals.insert(id.as_str()) {
                    return Err(SelectionError::AlreadyWithdrawn(id.clone()));
                }
            }
        }
        for ev in events {
            self.capacity_events.push(ev.clone());
            let seat_opened = match ev {
                CapacityEvent::AddSeat => true,
                CapacityEvent::Withdraw(id) => {
                    self.withdrawn.insert(id.clone());
                    self.holders.remove(id)
                }
            };
            if seat_opened {
                self.offer_next();
            }
        }
        Ok(())
    }

    fn offer_next(&mut self) {
        while self.cursor < self.ranking.len() {
            let id = &self.ranking[self.cursor];
            self.cursor += 1;
            if self.holders.contains(id) || self.withdrawn.contains(id) || self.offered.contains(id) {
                continue;
            }
            self.offered.insert(id.clone());
            self.holders.insert(id.clone());
            self.offers_made.push(id.clone());
            return;
        }
        self.unfilled += 1;
    }
}

pub fn vacancy_fill(
    outcome: &SelectionOutcome,
    full_ranking: &[String],
    events: &[CapacityEvent],
) -> Result<VacancyLedger, SelectionError> {
    let mut ledger = VacancyLedger::open(outcome, full_ranking);
    ledger.apply(events)?;
    Ok(ledger)
}
