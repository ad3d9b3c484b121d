//! Acceptance gate. Prints one PASS / FAIL / SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 1-8 need the PISA 2022 student file: set `AMF_PISA_CSV` to its
//! path (and optionally `AMF_PISA_COUNTRY`, e.g. `KOR`, to filter on `CNT`).

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use amf_core::calibration::{linear_fit, ses_gradient};
use amf_core::correction::{apply_correction, CorrectionPolicy};
use amf_core::dataset::{load_cohort_path, remove_ses_outliers, Cohort, ColumnMapping, QuartileMethod, RowFilter};
use amf_core::dbn::{
    build_kernel, compare_baseline_amf, populations, simulate_individual, stationary_distribution, total_variation, DbnSpec,
    Matrix, SesSign, M_ADMIT, M_NOT, TIERS,
};
use amf_core::perturbation::{run_experiment, weighted_estimates, PerturbationKind, PerturbationSpec, RobustnessReport};
use amf_core::rng::DrawStream;
use amf_core::selection::{indexed_threshold, select, vacancy_fill, CapacityEvent, KRounding, SelectionOutcome, VacancyLedger};
use amf_core::ses_index::{percentile_rank, RankMethod};
use amf_core::spine::{run_spine, verify_closure, OptInRegister, SpineConfig};
use amf_core::synthetic::{synthetic_cohort, SyntheticSpec};
use common::{oracle_select, random_cohort};

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::*;

const ALPHAS: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 50.0];
const N_COHORTS: u64 = 1000;

struct Pisa {
    raw: Cohort,
    cleaned: Cohort,
}

fn load_pisa() -> Option<Result<Pisa, String>> {
    let path = std::env::var("AMF_PISA_CSV").ok()?;
    let mut schema = ColumnMapping::pisa();
    if let Ok(cnt) = std::env::var("AMF_PISA_COUNTRY") {
        schema.filter = Some(RowFilter { column: "CNT".into(), value: cnt });
    }
    Some(
        load_cohort_path(Path::new(&path), &schema)
            .map(|raw| {
                let (cleaned, _) = remove_ses_outliers(&raw, QuartileMethod::Linear);
                Pisa { raw, cleaned }
            })
            .map_err(|e| format!("cannot load {path}: {e}")),
    )
}

fn counts(cohort: &Cohort, method: RankMethod, alphas: &[f64]) -> Vec<usize> {
    let ix = percentile_rank(cohort, method).unwrap();
    let t = indexed_threshold(&ix, 0.10, KRounding::default()).unwrap();
    alphas.iter().map(|&a| select(&ix, &t, &CorrectionPolicy::new(a, 0.5).unwrap(), None).unwrap().n_conditional()).collect()
}

/// First rank method reproducing the published counts, if any.
fn matching_method(p: &Pisa) -> Option<RankMethod> {
    RankMethod::ALL.into_iter().find(|&m| counts(&p.cleaned, m, &[5.0, 10.0, 15.0]) == [4, 6, 9])
}

fn outcome(cohort: &Cohort, method: RankMethod, f: f64, alpha: f64) -> SelectionOutcome {
    let ix = percentile_rank(cohort, method).unwrap();
    let t = indexed_threshold(&ix, f, KRounding::default()).unwrap();
    select(&ix, &t, &CorrectionPolicy::new(alpha, 0.5).unwrap(), None).unwrap()
}

fn c1_cleaning(p: &Pisa) -> Verdict {
    let (_, rep) = remove_ses_outliers(&p.raw, QuartileMethod::Linear);
    let others: Vec<String> = QuartileMethod::ALL
        .iter()
        .map(|&m| format!("{m}={}", remove_ses_outliers(&p.raw, m).1.removed_ids.len()))
        .collect();
    let detail = format!("{} -> {}, {} removed (type 7); by method: {}", rep.n_before, rep.n_after, rep.removed_ids.len(), others.join(" "));
    let off = (rep.removed_ids.len() as i64 - 14).abs();
    if rep.n_before == 6391 && rep.n_after == 6377 && off == 0 {
        Pass(detail)
    } else if rep.n_before == 6391 && off <= 2 {
        Pass(format!("{detail}; FLAG: quartile-method sensitivity, off by {off}"))
    } else {
        Fail(detail)
    }
}

fn c2_threshold(p: &Pisa) -> Verdict {
    let ix = percentile_rank(&p.cleaned, RankMethod::Hazen).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (f, want) in [(0.10, 666.62), (0.05, 698.43), (0.15, 642.94)] {
        let t = indexed_threshold(&ix, f, KRounding::default()).unwrap().t;
        ok &= (t - want).abs() <= 0.01 + 1e-9;
        parts.push(format!("top {}%: {t:.2} (want {want})", f * 100.0));
    }
    verdict(ok, parts.join(", "))
}

fn c3_counts(p: &Pisa) -> Verdict {
    let by: Vec<String> =
        RankMethod::ALL.iter().map(|&m| format!("{m}={:?}", counts(&p.cleaned, m, &[5.0, 10.0, 15.0]))).collect();
    match matching_method(p) {
        Some(m) => Pass(format!("matching rank method: {m}; {}", by.join(" "))),
        None => Fail(format!("no rank method gives [4, 6, 9]; {}", by.join(" "))),
    }
}

fn c4_quartiles(p: &Pisa) -> Verdict {
    let Some(m) = matching_method(p) else { return Fail("criterion 3 not met".into()) };
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, want) in [(5.0, 50.0), (10.0, 67.0), (15.0, 78.0)] {
        let q = outcome(&p.cleaned, m, 0.10, a).quartile_composition;
        let q1 = (q.q1 * 100.0).round();
        ok &= q.q3 == 0.0 && q.q4 == 0.0 && q1 == want;
        parts.push(format!("alpha {a}: Q1 {q1}% Q1+Q2 {:.0}%", (q.q1 + q.q2) * 100.0));
    }
    verdict(ok, parts.join(", "))
}

fn c5_corrections(p: &Pisa) -> Verdict {
    let m = matching_method(p).unwrap_or_default();
    let mut ok = true;
    let mut parts = Vec::new();
    for (a, mean, max) in [(5.0, 1.48, 2.32), (10.0, 2.99, 4.64), (15.0, 4.76, 6.95)] {
        let s = outcome(&p.cleaned, m, 0.10, a).summary();
        let (gm, gx) = (s.correction.mean.unwrap_or(f64::NAN), s.correction.max.unwrap_or(f64::NAN));
        ok &= (gm - mean).abs() <= 0.05 + 1e-9 && (gx - max).abs() <= 0.05 + 1e-9;
        parts.push(format!("alpha {a}: mean {gm:.2} max {gx:.2}"));
    }
    verdict(ok, format!("rank method {m}; {}", parts.join(", ")))
}

fn c6_gradient(p: &Pisa) -> Verdict {
    let g = ses_gradient(&p.cleaned, true).unwrap();
    let close = |x: f64, w: f64| ((x - w) / w).abs() <= 0.01;
    let ok = close(g.beta_gradient, 47.29) && close(g.r_squared, 0.136) && close(g.sigma_escs, 0.823) && close(g.delta_per_sd, 38.90);
    verdict(
        ok,
        format!("beta {:.2}, R2 {:.4}, sd {:.4}, per-SD {:.2}", g.beta_gradient, g.r_squared, g.sigma_escs, g.delta_per_sd),
    )
}

fn experiment(c: &Cohort, kind: PerturbationKind, method: RankMethod) -> RobustnessReport {
    let mut spec = PerturbationSpec::new(kind, 10.0);
    spec.rank_method = method;
    run_experiment(c, &spec).unwrap()
}

fn c7_robustness(p: &Pisa) -> Verdict {
    let m = matching_method(p).unwrap_or_default();
    let n = |k| experiment(&p.cleaned, k, m).rows[0].n_conditional;
    let var = [n(PerturbationKind::VarianceScale { s: 0.8 }), n(PerturbationKind::VarianceScale { s: 1.2 })];
    let sweep = [0.05, 0.10, 0.15].map(|f| n(PerturbationKind::TopFraction { top_fraction: f }));
    let start = Instant::now();
    let mut noise_ok = true;
    let mut noise = Vec::new();
    for sigma in [0.05, 0.10] {
        let r = experiment(&p.cleaned, PerturbationKind::SesNoise { sigma }, m);
        let q4 = r.rows.iter().all(|row| row.quartile_counts[3] == 0);
        noise_ok &= r.rows.len() == 200 && q4 && r.aggregates.mean_quartile_shares.q3 <= 0.02;
        noise.push(format!("sigma {sigma}: Q4 never {q4}, mean Q3 {:.3}", r.aggregates.mean_quartile_shares.q3));
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = var == [7, 6] && sweep == [6, 6, 8] && noise_ok && secs < 60.0;
    verdict(ok, format!("variance {var:?}, sweep {sweep:?}, {}; noise suite {secs:.1}s", noise.join("; ")))
}

fn c8_weighted(p: &Pisa) -> Verdict {
    let m = matching_method(p).unwrap_or_default();
    let ix = percentile_rank(&p.cleaned, m).unwrap();
    let t = indexed_threshold(&ix, 0.10, KRounding::default()).unwrap();
    let w = weighted_estimates(&ix, &t, &CorrectionPolicy::new(15.0, 0.5).unwrap()).unwrap();
    let ok = (w.weighted_n_conditional - 760.0).abs() <= 38.0 && w.weighted_bottom_half_share == 1.0;
    verdict(ok, format!("weighted {:.1}, bottom-half share {:.4}", w.weighted_n_conditional, w.weighted_bottom_half_share))
}

fn c9_linearity() -> Verdict {
    let (slope, _, r2) = linear_fit(&[5.0, 10.0, 15.0], &[4.0, 6.0, 9.0], true).unwrap();
    verdict(r2 >= 0.98, format!("slope {slope:.3}, R2 {r2:.5}"))
}

fn cohort_for(seed: u64) -> (Cohort, f64) {
    let n = 20 + (seed as usize * 37) % 481;
    let f = [0.05, 0.10, 0.15, 0.20, 0.30][seed as usize % 5];
    (random_cohort(seed, n), f)
}

fn id_set<'a>(it: impl Iterator<Item = &'a str>) -> BTreeSet<String> {
    it.map(String::from).collect()
}

fn c10_non_displacement() -> Verdict {
    let mut regular_total = 0;
    for seed in 0..N_COHORTS {
        let (c, f) = cohort_for(seed);
        let base = id_set(outcome(&c, RankMethod::Hazen, f, 0.0).regular.iter().map(|r| r.id.as_str()));
        regular_total += base.len();
        for a in ALPHAS {
            let o = outcome(&c, RankMethod::Hazen, f, a);
            if id_set(o.regular.iter().map(|r| r.id.as_str())) != base {
                return Fail(format!("cohort {seed}: regular set changed at alpha {a}"));
            }
        }
    }
    Pass(format!("{N_COHORTS} cohorts x {} alphas; {regular_total} regular admits held fixed", ALPHAS.len()))
}

fn c11_nestedness() -> Verdict {
    let mut grew = 0;
    for seed in 0..N_COHORTS {
        let (c, f) = cohort_for(seed);
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for a in ALPHAS {
            let cur = id_set(outcome(&c, RankMethod::Hazen, f, a).conditional.iter().map(|x| x.id.as_str()));
            if !prev.is_subset(&cur) {
                return Fail(format!("cohort {seed}: conditional set at alpha {a} drops an earlier admit"));
            }
            grew += usize::from(cur.len() > prev.len());
            prev = cur;
        }
    }
    Pass(format!("{N_COHORTS} cohorts; {grew} strict growth steps"))
}

fn c12_bounds() -> Verdict {
    let mut checked = 0;
    for alpha in [0.5, 1.0, 5.0, 7.3, 10.0, 15.0, 50.0] {
        let p = CorrectionPolicy::new(alpha, 0.5).unwrap();
        for i in 0..=10_000 {
            let s = i as f64 / 10_000.0;
            let c = apply_correction(s, 500.0, &p).unwrap().c;
            if !(0.0..=alpha / 2.0).contains(&c) {
                return Fail(format!("alpha {alpha}, S {s}: C = {c}"));
            }
            if (c > 0.0) != (s < 0.5) {
                return Fail(format!("alpha {alpha}, S {s}: C = {c} breaks eligibility"));
            }
            checked += 1;
        }
    }
    Pass(format!("{checked} grid points over 7 alphas"))
}

fn c13_oracle() -> Verdict {
    let mut compared = 0;
    for seed in 0..N_COHORTS {
        let (c, f) = cohort_for(seed);
        let ix = percentile_rank(&c, RankMethod::Hazen).unwrap();
        let t = indexed_threshold(&ix, f, KRounding::default()).unwrap();
        for a in ALPHAS {
            let o = select(&ix, &t, &CorrectionPolicy::new(a, 0.5).unwrap(), None).unwrap();
            let want = oracle_select(&ix, f, a, 0.5);
            let mut got: Vec<_> = o.conditional.iter().map(|x| (x.id.clone(), x.c, x.m_star, x.delta, x.gap)).collect();
            got.sort_by(|x, y| x.0.cmp(&y.0));
            if o.threshold.t != want.t || id_set(o.regular.iter().map(|r| r.id.as_str())) != want.regular || got != want.conditional {
                return Fail(format!("cohort {seed}, alpha {a}: selection differs from per-record evaluation"));
            }
            compared += got.len();
        }
    }
    Pass(format!("{N_COHORTS} cohorts (N <= 500) x {} alphas; {compared} conditional admits matched field by field", ALPHAS.len()))
}

fn frozen(register: OptInRegister) -> OptInRegister {
    let mut r = register;
    r.freeze();
    r
}

fn c14_spine() -> Verdict {
    let raw = synthetic_cohort(&SyntheticSpec::default()).to_csv_bytes();
    let cfg = SpineConfig { schema: ColumnMapping::export(), ..Default::default() };
    let a = run_spine(&raw, &cfg, frozen(OptInRegister::new())).unwrap();
    let b = run_spine(&raw, &cfg, frozen(OptInRegister::new())).unwrap();
    if a.seal != b.seal {
        return Fail("identical runs produced different seals".into());
    }
    let dir = tempfile::tempdir().unwrap();
    a.persist(dir.path()).unwrap();
    if let Err(e) = verify_closure(dir.path()) {
        return Fail(format!("untouched run fails verification: {e}"));
    }
    let mut tampers = 0;
    let mut names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for path in &names {
        let original = fs::read(path).unwrap();
        let step = (original.len() / 7).max(1);
        for pos in (0..original.len()).step_by(step) {
            let mut bytes = original.clone();
            bytes[pos] ^= 0x01;
            fs::write(path, &bytes).unwrap();
            if verify_closure(dir.path()).is_ok() {
                return Fail(format!("flipped byte {pos} of {} went undetected", path.display()));
            }
            tampers += 1;
        }
        fs::write(path, &original).unwrap();
    }
    let cohort = Cohort::from_export_csv(raw.as_slice(), "x").unwrap();
    let mut register = OptInRegister::new();
    for r in &cohort.records {
        register.set_pre(&r.id, false).unwrap();
    }
    let opted_out = run_spine(&raw, &cfg, frozen(register)).unwrap();
    let n = opted_out.outcome.outcome().n_conditional();
    verdict(
        n == 0 && a.outcome.outcome().n_conditional() > 0,
        format!("seals equal; {tampers} one-byte tampers across {} artifacts all rejected; all-opt-out conditional admits {n}", names.len()),
    )
}

fn power_oracle(m: &Matrix) -> [f64; TIERS] {
    let mul = |a: &Matrix, b: &Matrix| {
        let mut c = [[0.0; TIERS]; TIERS];
        for i in 0..TIERS {
            for j in 0..TIERS {
                c[i][j] = (0..TIERS).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        c
    };
    let mut p = *m;
    for _ in 0..64 {
        p = mul(&p, &p);
        for row in p.iter_mut() {
            let sum: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    p[0]
}

fn c15_dbn() -> Verdict {
    let mut kernels = 0;
    for sign in [SesSign::Declining, SesSign::Rising] {
        let spec = DbnSpec { ses_sign: sign, ..Default::default() };
        for base in [M_NOT, M_ADMIT] {
            for si in 0..=100 {
                for ci in 0..=40 {
                    for t in [1, 2, 30] {
                        let k = build_kernel(&spec, &base, si as f64 / 100.0, ci as f64 * 0.25, t).unwrap();
                        if k.iter().any(|row| (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 || row.iter().any(|v| *v < 0.0)) {
                            return Fail(format!("kernel at S {si}%, c {}, t {t} not row-stochastic", ci as f64 * 0.25));
                        }
                        kernels += 1;
                    }
                }
            }
        }
    }

    let cohort = remove_ses_outliers(&synthetic_cohort(&SyntheticSpec::default()), QuartileMethod::Linear).0;
    let ix = percentile_rank(&cohort, RankMethod::Hazen).unwrap();
    let policy = CorrectionPolicy::new(10.0, 0.5).unwrap();
    let spec = DbnSpec::default();
    let (base_pop, amf_pop) = populations(&ix, &policy, 0.10).unwrap();
    let mut zero_c = 0;
    for (i, (b, a)) in base_pop.iter().zip(&amf_pop).enumerate() {
        if a.c != 0.0 {
            continue;
        }
        if b != a || simulate_individual(&spec, b, i, 0).unwrap() != simulate_individual(&spec, a, i, 0).unwrap() {
            return Fail(format!("individual {i} with c = 0 differs between baseline and intervention"));
        }
        zero_c += 1;
    }

    let mut tv_max: f64 = 0.0;
    for m in [M_NOT, M_ADMIT] {
        tv_max = tv_max.max(total_variation(&stationary_distribution(&m, 1e-13, 1_000_000), &power_oracle(&m)));
    }

    let d = compare_baseline_amf(&spec, &ix, &policy, 0.10, 0).unwrap();
    let q1 = d.baseline.q1_share_final * 100.0;
    let ok = zero_c > 0 && tv_max <= 1e-6 && (q1 - 39.5).abs() <= 1.0 && (0.0..0.5).contains(&d.improvement_pp);
    verdict(
        ok,
        format!(
            "{kernels} kernels stochastic; {zero_c} c = 0 individuals identical; stationary TV {tv_max:.1e}; \
             baseline Q1 {q1:.3}%, improvement {:.4} pp (stylized matrices, synthetic cohort)",
            d.improvement_pp
        ),
    )
}

fn random_events(seed: u64, ranking: &[String]) -> Vec<CapacityEvent> {
    let mut d = DrawStream::new(seed, 11);
    let len = 1 + (d.uniform() * 40.0) as usize;
    let mut pool: Vec<&String> = ranking.iter().collect();
    let mut events = Vec::new();
    for _ in 0..len {
        if d.uniform() < 0.2 || pool.is_empty() {
            events.push(CapacityEvent::AddSeat);
        } else {
            let j = ((d.uniform() * d.uniform()) * pool.len() as f64) as usize;
            events.push(CapacityEvent::Withdraw(pool.remove(j).clone()));
        }
    }
    events
}

fn c16_vacancy() -> Verdict {
    let mut offers = 0;
    for seed in 0..N_COHORTS {
        let n = 20 + (seed as usize * 13) % 181;
        let c = random_cohort(seed ^ 0x5151, n);
        let o = outcome(&c, RankMethod::Hazen, 0.10, 10.0);
        let events = random_events(seed, &o.ranking);
        let batched = vacancy_fill(&o, &o.ranking, &events).unwrap();
        let mut sequential = VacancyLedger::open(&o, &o.ranking);
        for ev in &events {
            sequential.apply(std::slice::from_ref(ev)).unwrap();
        }
        if batched.offers_made != sequential.offers_made || batched.unfilled != sequential.unfilled {
            return Fail(format!("instance {seed}: sequential and batched offers differ"));
        }
        offers += batched.offers_made.len();
    }
    Pass(format!("{N_COHORTS} instances; {offers} offers identical"))
}

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Fail(format!("panicked: {}", msg.unwrap_or_default()))
        }
    }
}

fn main() -> ExitCode {
    let pisa = load_pisa();
    type Golden = fn(&Pisa) -> Verdict;
    let golden: [(&str, Golden); 8] = [
        ("cleaning counts", c1_cleaning),
        ("thresholds", c2_threshold),
        ("conditional admit counts", c3_counts),
        ("quartile composition", c4_quartiles),
        ("correction statistics", c5_corrections),
        ("SES gradient", c6_gradient),
        ("robustness suite", c7_robustness),
        ("weighted estimates", c8_weighted),
    ];
    let standalone: [(&str, fn() -> Verdict); 8] = [
        ("trade-off linearity", c9_linearity),
        ("non-displacement", c10_non_displacement),
        ("nestedness", c11_nestedness),
        ("correction bound and eligibility", c12_bounds),
        ("brute-force oracle", c13_oracle),
        ("spine determinism and tamper evidence", c14_spine),
        ("mobility simulation", c15_dbn),
        ("vacancy fill path-independence", c16_vacancy),
    ];

    let mut results = Vec::new();
    for (name, f) in golden {
        let v = match &pisa {
            None => Skip("AMF_PISA_CSV not set; PISA 2022 file unavailable".into()),
            Some(Err(e)) => Fail(e.clone()),
            Some(Ok(p)) => guarded(|| f(p)),
        };
        results.push((name, v));
    }
    for (name, f) in standalone {
        results.push((name, guarded(f)));
    }

    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        let (tag, detail) = match v {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    let passed = results.iter().filter(|(_, v)| matches!(v, Pass(_))).count();
    let skipped = results.iter().filter(|(_, v)| matches!(v, Skip(_))).count();
    println!("acceptance: {passed} passed, {failed} failed, {skipped} skipped");
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
