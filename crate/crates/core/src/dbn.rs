//! Four-tier intergenerational mobility chain with an SES tilt and a one-shot
//! correction shock.
//!
//! Occupancy is propagated exactly (expected distribution per individual,
//! averaged). Mobility rates come from sampled trajectories that share random
//! numbers across scenarios, so a baseline and an intervention run differ only
//! through their kernels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::correction::{apply_correction, CorrectionPolicy};
use crate::rng::DrawStream;
use crate::selection::{indexed_threshold, select, KRounding, SelectionError};
use crate::ses_index::SesIndexedCohort;

pub const TIERS: usize = 4;
pub type Matrix = [[f64; TIERS]; TIERS];
pub type Dist = [f64; TIERS];

#[derive(Debug, Error, PartialEq)]
pub enum DbnError {
    #[error("row {row} of {which} sums to {sum}, not 1")]
    NotStochastic { which: &'static str, row: usize, sum: f64 },
    #[error("{which} has a negative or non-finite entry")]
    BadEntry { which: &'static str },
    #[error("initial distribution must be non-negative and sum to 1")]
    BadInitial,
    #[error("shock needs kappa >= 0 and c_cap > 0")]
    BadShock,
    #[error("row {0} is all zero after clamping")]
    DegenerateRow(usize),
    #[error("SES {0} outside [0, 1]")]
    SesOutOfRange(f64),
    #[error("correction must be >= 0, got {0}")]
    NegativeCorrection(f64),
    #[error("population is empty")]
    EmptyPopulation,
    #[error(transparent)]
    Selection(#[from] SelectionError),
}

/// Sign convention for the SES tilt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SesSign {
    /// Upward entries fall as SES rises; downward entries rise.
    #[default]
    Declining,
    /// Upward entries rise with SES; downward entries fall.
    Rising,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub kappa: f64,
    pub c_cap: f64,
}

impl Default for Shock {
    fn default() -> Self {
        Self { kappa: 0.02, c_cap: 7.5 }
    }
}

impl Shock {
    /// Saturating linear: `kappa * min(c, c_cap) / c_cap`.
    pub fn f(&self, c: f64) -> f64 {
        self.kappa * c.min(self.c_cap) / self.c_cap
    }
}

/// Per-tier Gaussian observation `R ~ N(means[x], sd)`; diagnostic only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub means: Dist,
    pub sd: f64,
}

impl Default for Emission {
    fn default() -> Self {
        Self { means: [400.0, 475.0, 550.0, 625.0], sd: 40.0 }
    }
}

/// Transitions for applicants who were not admitted.
pub const M_NOT: Matrix = [
    [0.805, 0.145, 0.04, 0.01],
    [0.30, 0.50, 0.15, 0.05],
    [0.08, 0.22, 0.55, 0.15],
    [0.02, 0.05, 0.15, 0.78],
];

/// Transitions for admitted applicants (regular or conditional).
pub const M_ADMIT: Matrix = [
    [0.68, 0.22, 0.07, 0.03],
    [0.15, 0.55, 0.20, 0.10],
    [0.05, 0.15, 0.55, 0.25],
    [0.01, 0.03, 0.14, 0.82],
];

pub const V0: Dist = [0.35, 0.30, 0.20, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbnSpec {
    /// Kernel for individuals who were not admitted.
    pub base_matrix: Matrix,
    pub admit_matrix: Matrix,
    pub gamma_ses: f64,
    pub ses_sign: SesSign,
    pub shock: Shock,
    pub emission: Emission,
    pub v0: Dist,
    pub generations: usize,
    /// Sampled trajectories per individual for mobility rates.
    pub trajectories_per_individual: usize,
    pub emit: bool,
}

impl Default for DbnSpec {
    fn default() -> Self {
        Self {
            base_matrix: M_NOT,
            admit_matrix: M_ADMIT,
            gamma_ses: 0.02,
            ses_sign: SesSign::default(),
            shock: Shock::default(),
            emission: Emission::default(),
            v0: V0,
            generations: 30,
            trajectories_per_individual: 1,
            emit: false,
        }
    }
}

pub fn check_stochastic(m: &Matrix, which: &'static str) -> Result<(), DbnError> {
    for (row, r) in m.iter().enumerate() {
        if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(DbnError::BadEntry { which });
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(DbnError::NotStochastic { which, row, sum });
        }
    }
    Ok(())
}

impl DbnSpec {
    pub fn validate(&self) -> Result<(), DbnError> {
        check_stochastic(&self.base_matrix, "base_matrix")?;
        check_stochastic(&self.admit_matrix, "admit_matrix")?;
        if self.v0.iter().any(|v| !v.is_finite() || *v < 0.0) || (self.v0.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(DbnError::BadInitial);
        }
        if !(self.shock.kappa >= 0.0 && self.shock.c_cap > 0.0) {
            return Err(DbnError::BadShock);
        }
        Ok(())
    }
}

/// Kernel for one individual at the transition into generation `t`.
pub fn build_kernel(spec: &DbnSpec, base: &Matrix, s: f64, c: f64, t: usize) -> Result<Matrix, DbnError> {
    if !(0.0..=1.0).contains(&s) {
        return Err(DbnError::SesOutOfRange(s));
    }
    if !(c >= 0.0) {
        return Err(DbnError::NegativeCorrection(c));
    }
    let tilt = (s - 0.5) * spec.gamma_ses;
    let up_sign = match spec.ses_sign {
        SesSign::Declining => -1.0,
        SesSign::Rising => 1.0,
    };
    let bump = if t == 1 { spec.shock.f(c) } else { 0.0 };
    let mut k = *base;
    for (a, row) in k.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            if a < b {
                *v += up_sign * tilt + bump;
            } else if a > b {
                *v -= up_sign * tilt;
            }
            *v = v.max(0.0);
        }
        let sum: f64 = row.iter().sum();
        if sum <= 0.0 {
            return Err(DbnError::DegenerateRow(a));
        }
        if sum != 1.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(k)
}

pub fn step(dist: &Dist, k: &Matrix) -> Dist {
    let mut out = [0.0; TIERS];
    for (a, p) in dist.iter().enumerate() {
        for (b, q) in k[a].iter().enumerate() {
            out[b] += p * q;
        }
    }
    out
}

pub fn total_variation(a: &Dist, b: &Dist) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// One simulated person: SES percentile, correction, and which kernel applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub s: f64,
    pub c: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    /// Expected tier distribution for generations `0..=G`.
    pub occupancy: Vec<Dist>,
    pub q1_share_final: f64,
    /// Sampled share of person-generations moving up a tier.
    pub upward_rate: f64,
    pub downward_rate: f64,
    /// Sampled share of trajectories that ever reach the top tier.
    pub top_state_reach: f64,
    /// Sampled upward share on the first transition only.
    pub upward_rate_t1: f64,
    /// Exact expectations of the two rates under the propagated distributions.
    pub expected_upward_rate: f64,
    pub expected_downward_rate: f64,
    /// Mean emitted observation per generation, when emissions are requested.
    pub mean_emission: Option<Vec<f64>>,
}

struct PersonOut {
    occupancy: Vec<Dist>,
    exp_up: f64,
    exp_down: f64,
    up: usize,
    down: usize,
    up_t1: usize,
    reach: usize,
    emissions: Vec<f64>,
    paths: Vec<Vec<usize>>,
}

fn draw_tier(p: &Dist, u: f64) -> usize {
    let mut acc = 0.0;
    for (i, q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    TIERS - 1
}

fn simulate_person(spec: &DbnSpec, person: &Individual, index: usize, seed: u64) -> Result<PersonOut, DbnError> {
    let base = if person.admitted { &spec.admit_matrix } else { &spec.base_matrix };
    let kernels = (1..=spec.generations)
        .map(|t| build_kernel(spec, base, person.s, person.c, t))
        .collect::<Result<Vec<_>, _>>()?;

    let mut occupancy = Vec::with_capacity(spec.generations + 1);
    let mut dist = spec.v0;
    occupancy.push(dist);
    let (mut exp_up, mut exp_down) = (0.0, 0.0);
    for k in &kernels {
        for a in 0..TIERS {
            exp_up += dist[a] * k[a][a + 1..].iter().sum::<f64>();
            exp_down += dist[a] * k[a][..a].iter().sum::<f64>();
        }
        dist = step(&dist, k);
        occupancy.push(dist);
    }

    let mut out = PersonOut {
        occupancy,
        exp_up,
        exp_down,
        up: 0,
        down: 0,
        up_t1: 0,
        reach: 0,
        emissions: vec![0.0; spec.generations + 1],
        paths: Vec::with_capacity(spec.trajectories_per_individual),
    };
    for j in 0..spec.trajectories_per_individual {
        let stream = (index * spec.trajectories_per_individual + j) as u64;
        let mut rng = DrawStream::new(seed, stream);
        let mut noise = DrawStream::new(seed ^ 0x9e37_79b9_7f4a_7c15, stream);
        let mut x = draw_tier(&spec.v0, rng.uniform());
        let mut reached = x == TIERS - 1;
        let mut path = Vec::with_capacity(spec.generations + 1);
        path.push(x);
        if spec.emit {
            out.emissions[0] += spec.emission.means[x] + spec.emission.sd * noise.standard_normal();
        }
        for (t, k) in kernels.iter().enumerate() {
            let next = draw_tier(&k[x], rng.uniform());
            if next > x {
                out.up += 1;
                if t == 0 {
                    out.up_t1 += 1;
                }
            } else if next < x {
                out.down += 1;
            }
            x = next;
            path.push(x);
            reached |= x == TIERS - 1;
            if spec.emit {
                out.emissions[t + 1] += spec.emission.means[x] + spec.emission.sd * noise.standard_normal();
            }
        }
        out.reach += usize::from(reached);
        out.paths.push(path);
    }
    Ok(out)
}

/// Exact occupancy and sampled tier paths for one person at position `index`
/// of a population, using the same streams as [`simulate_population`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRun {
    pub occupancy: Vec<Dist>,
    pub paths: Vec<Vec<usize>>,
}

pub fn simulate_individual(spec: &DbnSpec, person: &Individual, index: usize, seed: u64) -> Result<IndividualRun, DbnError> {
    spec.validate()?;
    let p = simulate_person(spec, person, index, seed)?;
    Ok(IndividualRun { occupancy: p.occupancy, paths: p.paths })
}

pub fn simulate_population(spec: &DbnSpec, population: &[Individual], seed: u64) -> Result<TrajectorySummary, DbnError> {
    spec.validate()?;
    if population.is_empty() {
        return Err(DbnError::EmptyPopulation);
    }
    let people = population
        .par_iter()
        .enumerate()
        .map(|(i, p)| simulate_person(spec, p, i, seed))
        .collect::<Result<Vec<_>, _>>()?;

    let n = population.len() as f64;
    let g = spec.generations;
    let mut occupancy = vec![[0.0; TIERS]; g + 1];
    let (mut up, mut down, mut up_t1, mut reach) = (0usize, 0usize, 0usize, 0usize);
    let (mut exp_up, mut exp_down) = (0.0, 0.0);
    let mut emissions = vec![0.0; g + 1];
    for p in &people {
        for (acc, d) in occupancy.iter_mut().zip(&p.occupancy) {
            for (x, y) in acc.iter_mut().zip(d) {
                *x += y;
            }
        }
        up += p.up;
        down += p.down;
        up_t1 += p.up_t1;
        reach += p.reach;
        exp_up += p.exp_up;
        exp_down += p.exp_down;
        for (acc, e) in emissions.iter_mut().zip(&p.emissions) {
            *acc += e;
        }
    }
    for d in &mut occupancy {
        for x in d.iter_mut() {
            *x /= n;
        }
    }
    let paths = n * spec.trajectories_per_individual as f64;
    let steps = paths * g as f64;
    let rate = |k: usize, denom: f64| if denom > 0.0 { k as f64 / denom } else { 0.0 };
    Ok(TrajectorySummary {
        q1_share_final: occupancy[g][0],
        occupancy,
        upward_rate: rate(up, steps),
        downward_rate: rate(down, steps),
        top_state_reach: rate(reach, paths),
        upward_rate_t1: rate(up_t1, paths),
        expected_upward_rate: if g > 0 { exp_up / (n * g as f64) } else { 0.0 },
        expected_downward_rate: if g > 0 { exp_down / (n * g as f64) } else { 0.0 },
        mean_emission: spec.emit.then(|| emissions.iter().map(|e| e / paths.max(1.0)).collect()),
    })
}

pub fn mobility_metrics(summary: &TrajectorySummary) -> MobilityMetrics {
    MobilityMetrics {
        upward_rate: summary.upward_rate,
        downward_rate: summary.downward_rate,
        top_state_reach: summary.top_state_reach,
        q1_share_final: summary.q1_share_final,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityMetrics {
    pub upward_rate: f64,
    pub downward_rate: f64,
    pub top_state_reach: f64,
    pub q1_share_final: f64,
}

/// Stationary distribution by power iteration from the uniform start.
pub fn stationary_distribution(m: &Matrix, tol: f64, max_iter: usize) -> Dist {
    let mut d = [1.0 / TIERS as f64; TIERS];
    for _ in 0..max_iter {
        let next = step(&d, m);
        let done = total_variation(&next, &d) < tol;
        d = next;
        if done {
            break;
        }
    }
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbnComparison {
    pub alpha: f64,
    pub baseline: TrajectorySummary,
    pub amf: TrajectorySummary,
    /// Baseline minus intervention bottom-tier share, in percentage points.
    pub improvement_pp: f64,
    /// Total-variation distance between the two occupancy paths per generation.
    pub tv_gap: Vec<f64>,
}

impl DbnComparison {
    pub fn occupancy_csv(&self) -> String {
        let mut out = String::from("generation,baseline_q1,baseline_q2,baseline_q3,baseline_q4,amf_q1,amf_q2,amf_q3,amf_q4,tv_gap\n");
        for (t, ((b, a), tv)) in self.baseline.occupancy.iter().zip(&self.amf.occupancy).zip(&self.tv_gap).enumerate() {
            out.push_str(&format!(
                "{t},{},{},{},{},{},{},{},{},{tv}\n",
                b[0], b[1], b[2], b[3], a[0], a[1], a[2], a[3]
            ));
        }
        out
    }
}

/// Baseline and intervention populations built from one selection run.
///
/// Baseline: no correction, only regular admits use the admit kernel.
/// Intervention: every opted-in applicant carries its correction into the
/// first transition and conditional admits also use the admit kernel.
pub fn populations(
    cohort: &SesIndexedCohort,
    policy: &CorrectionPolicy,
    top_fraction: f64,
) -> Result<(Vec<Individual>, Vec<Individual>), DbnError> {
    let threshold = indexed_threshold(cohort, top_fraction, KRounding::default())?;
    let outcome = select(cohort, &threshold, policy, None)?;
    let regular = outcome.regular_ids();
    let conditional = outcome.conditional_ids();
    let mut baseline = Vec::with_capacity(cohort.len());
    let mut amf = Vec::with_capacity(cohort.len());
    for r in &cohort.records {
        let id = r.record.id.as_str();
        let is_regular = regular.contains(id);
        let c = if r.record.pre_optin {
            apply_correction(r.s, r.record.merit_score, policy).map_err(SelectionError::from)?.c.max(0.0)
        } else {
            0.0
        };
        baseline.push(Individual { s: r.s, c: 0.0, admitted: is_regular });
        amf.push(Individual { s: r.s, c, admitted: is_regular || conditional.contains(id) });
    }
    Ok((baseline, amf))
}

pub fn compare_baseline_amf(
    spec: &DbnSpec,
    cohort: &SesIndexedCohort,
    policy: &CorrectionPolicy,
    top_fraction: f64,
    seed: u64,
) -> Result<DbnComparison, DbnError> {
    let (base_pop, amf_pop) = populations(cohort, policy, top_fraction)?;
    let baseline = simulate_population(spec, &base_pop, seed)?;
    let amf = simulate_population(spec, &amf_pop, seed)?;
    let tv_gap = baseline.occupancy.iter().zip(&amf.occupancy).map(|(a, b)| total_variation(a, b)).collect();
    Ok(DbnComparison {
        alpha: policy.alpha,
        improvement_pp: (baseline.q1_share_final - amf.q1_share_final) * 100.0,
        baseline,
        amf,
        tv_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const IDENTITY: Matrix = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

    fn plain(m: Matrix) -> DbnSpec {
        DbnSpec { base_matrix: m, admit_matrix: m, gamma_ses: 0.0, shock: Shock { kappa: 0.0, c_cap: 7.5 }, ..Default::default() }
    }

    #[test]
    fn no_tilt_no_shock_is_base() {
        let spec = DbnSpec { gamma_ses: 0.0, ..Default::default() };
        assert_eq!(build_kernel(&spec, &M_NOT, 0.1, 0.0, 1).unwrap(), M_NOT);
    }

    #[test]
    fn median_ses_has_no_tilt() {
        let spec = DbnSpec::default();
        assert_eq!(build_kernel(&spec, &M_NOT, 0.5, 0.0, 3).unwrap(), M_NOT);
    }

    #[test]
    fn shock_only_at_first_transition() {
        let spec = DbnSpec::default();
        for t in 2..6 {
            assert_eq!(
                build_kernel(&spec, &M_NOT, 0.2, 5.0, t).unwrap(),
                build_kernel(&spec, &M_NOT, 0.2, 0.0, t).unwrap()
            );
        }
        assert_ne!(build_kernel(&spec, &M_NOT, 0.2, 5.0, 1).unwrap(), build_kernel(&spec, &M_NOT, 0.2, 0.0, 1).unwrap());
    }

    #[test]
    fn tilt_direction() {
        let spec = DbnSpec { shock: Shock { kappa: 0.0, c_cap: 1.0 }, ..Default::default() };
        let low = build_kernel(&spec, &M_NOT, 0.0, 0.0, 2).unwrap();
        let high = build_kernel(&spec, &M_NOT, 1.0, 0.0, 2).unwrap();
        assert!(low[0][1] > high[0][1]);
        let std = DbnSpec { ses_sign: SesSign::Rising, ..spec };
        assert!(build_kernel(&std, &M_NOT, 0.0, 0.0, 2).unwrap()[0][1] < build_kernel(&std, &M_NOT, 1.0, 0.0, 2).unwrap()[0][1]);
    }

    #[test]
    fn clamp_and_renormalize() {
        let spec = DbnSpec { gamma_ses: 10.0, ..Default::default() };
        let k = build_kernel(&spec, &M_NOT, 1.0, 0.0, 2).unwrap();
        check_stochastic(&k, "k").unwrap();
        assert_eq!(k[0][1], 0.0);
    }

    #[test]
    fn shock_saturates() {
        let s = Shock::default();
        assert_eq!(s.f(0.0), 0.0);
        assert_eq!(s.f(7.5), 0.02);
        assert_eq!(s.f(100.0), 0.02);
    }

    #[test]
    fn identity_chain_holds_v0() {
        let pop = vec![Individual { s: 0.3, c: 0.0, admitted: false }; 50];
        let sum = simulate_population(&plain(IDENTITY), &pop, 1).unwrap();
        assert!(sum.occupancy.iter().all(|d| total_variation(d, &V0) < 1e-15));
        assert_eq!(sum.upward_rate, 0.0);
        assert_eq!(sum.downward_rate, 0.0);
        assert_eq!(sum.occupancy.len(), 31);
    }

    #[test]
    fn uniform_kernel_upward_rate() {
        let spec = DbnSpec { v0: [0.25; 4], trajectories_per_individual: 4, ..plain([[0.25; 4]; 4]) };
        let pop = vec![Individual { s: 0.5, c: 0.0, admitted: false }; 2000];
        let sum = simulate_population(&spec, &pop, 9).unwrap();
        assert!((sum.expected_upward_rate - 0.375).abs() < 1e-12);
        // 240k person-steps: SD of the rate is about 0.001
        assert!((sum.upward_rate - 0.375).abs() < 0.005, "{}", sum.upward_rate);
    }

    #[test]
    fn stationary_oracle_agrees() {
        let pi = stationary_distribution(&M_NOT, 1e-15, 100_000);
        let sum = simulate_population(
            &DbnSpec { generations: 200, trajectories_per_individual: 0, ..plain(M_NOT) },
            &[Individual { s: 0.5, c: 0.0, admitted: false }],
            0,
        )
        .unwrap();
        assert!(total_variation(&sum.occupancy[200], &pi) < 1e-6);
    }

    #[test]
    fn invalid_specs() {
        let mut bad = M_NOT;
        bad[0][0] = 0.9;
        assert!(matches!(plain(bad).validate(), Err(DbnError::NotStochastic { .. })));
        assert_eq!(DbnSpec { v0: [0.5; 4], ..Default::default() }.validate(), Err(DbnError::BadInitial));
        assert!(build_kernel(&DbnSpec::default(), &M_NOT, 1.5, 0.0, 1).is_err());
    }
}
