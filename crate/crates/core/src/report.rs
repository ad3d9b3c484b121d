//! Result bundles, the published-value comparison, and file emission
//! (JSON, CSV, markdown, SVG).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{curve_csv, CalibrationRow, GradientEstimate, TradeoffCurve};
use crate::dataset::OutlierReport;
use crate::dbn::DbnComparison;
use crate::perturbation::{RobustnessReport, WeightedReport};
use crate::selection::SelectionSummary;

const PUBLISHED_CSV: &str = include_str!("../data/published.csv");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedValue {
    pub key: String,
    pub quantity: String,
    pub value: f64,
    pub tolerance: f64,
    pub citation: String,
}

/// Static fixture of reference values, each with its table or figure.
pub fn published_values() -> Vec<PublishedValue> {
    let mut rdr = csv::Reader::from_reader(PUBLISHED_CSV.as_bytes());
    rdr.deserialize().map(|r| r.expect("fixture rows are well formed")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    /// Where the cohort came from; printed at the top of the report.
    pub source: Option<String>,
    pub cleaning: Option<OutlierReport>,
    pub gradient: Option<GradientEstimate>,
    pub calibration: Vec<CalibrationRow>,
    /// Selection summaries, one per (alpha, top fraction) run.
    pub selections: Vec<SelectionSummary>,
    pub curve: Option<TradeoffCurve>,
    pub robustness: Vec<RobustnessReport>,
    pub weighted: Vec<WeightedReport>,
    pub dbn: Option<DbnComparison>,
}

fn key_num(x: f64) -> String {
    format!("{x}")
}

impl ResultsBundle {
    /// Computed values under the fixture's keys.
    pub fn computed_values(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        if let Some(c) = &self.cleaning {
            out.insert("cleaning.n_after".into(), c.n_after as f64);
            out.insert("cleaning.removed".into(), c.removed_ids.len() as f64);
        }
        for s in &self.selections {
            out.insert(format!("threshold.{}", key_num(s.top_fraction)), s.threshold);
            if s.top_fraction != 0.10 {
                continue;
            }
            let a = key_num(s.alpha);
            out.insert(format!("admits.{a}"), s.n_conditional as f64);
            out.insert(format!("share_pct.{a}"), s.share_of_cohort * 100.0);
            out.insert(format!("q1_pct.{a}"), s.quartile_composition.q1 * 100.0);
            out.insert(format!("q2_pct.{a}"), s.quartile_composition.q2 * 100.0);
            let stats = [("c", &s.correction), ("gap", &s.gap), ("delta", &s.delta)];
            for (name, st) in stats {
                for (what, v) in [("min", st.min), ("max", st.max), ("mean", st.mean), ("sd", st.sd)] {
                    if let Some(v) = v {
                        out.insert(format!("{what}_{name}.{a}"), v);
                    }
                }
            }
        }
        if let Some(g) = &self.gradient {
            out.insert("gradient.beta".into(), g.beta_gradient);
            out.insert("gradient.r2".into(), g.r_squared);
            out.insert("gradient.sigma".into(), g.sigma_escs);
            out.insert("gradient.delta".into(), g.delta_per_sd);
        }
        for row in &self.calibration {
            out.insert(format!("calibration_pct.{}", key_num(row.alpha)), row.fraction_percent as f64);
        }
        if let Some(fit) = self.curve.as_ref().and_then(|c| c.fit) {
            out.insert("tradeoff.r2".into(), fit.r_squared);
        }
        for r in &self.robustness {
            use crate::perturbation::PerturbationKind::*;
            match r.spec.kind {
                VarianceScale { s } => {
                    out.insert(format!("variance.{}", key_num(s)), r.rows[0].n_conditional as f64);
                }
                TopFraction { top_fraction } => {
                    out.insert(format!("sweep.{}", key_num(top_fraction)), r.rows[0].n_conditional as f64);
                }
                _ => {}
            }
        }
        for w in &self.weighted {
            out.insert(format!("weighted.{}", key_num(w.alpha)), w.weighted_n_conditional);
        }
        if let Some(d) = &self.dbn {
            out.insert("dbn.q1_pct".into(), d.baseline.q1_share_final * 100.0);
            out.insert("dbn.improvement_pp".into(), d.improvement_pp);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub key: String,
    pub quantity: String,
    pub computed: Option<f64>,
    pub published: f64,
    pub tolerance: f64,
    pub citation: String,
    /// `None` when the bundle has no computed value for this entry.
    pub matched: Option<bool>,
}

pub fn compare(bundle: &ResultsBundle) -> Vec<ComparisonRow> {
    let computed = bundle.computed_values();
    published_values()
        .into_iter()
        .map(|p| {
            let c = computed.get(&p.key).copied();
            ComparisonRow {
                matched: c.map(|c| (c - p.value).abs() <= p.tolerance + 1e-9),
                computed: c,
                key: p.key,
                quantity: p.quantity,
                published: p.value,
                tolerance: p.tolerance,
                citation: p.citation,
            }
        })
        .collect()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "n/a".into())
}

fn flag(m: Option<bool>) -> &'static str {
    match m {
        Some(true) => "match",
        Some(false) => "MISMATCH",
        None => "not computed",
    }
}

pub fn markdown_report(bundle: &ResultsBundle) -> String {
    let rows = compare(bundle);
    let by_key: BTreeMap<&str, &ComparisonRow> = rows.iter().map(|r| (r.key.as_str(), r)).collect();
    let mut md = String::from("# Reproduction report\n\n");
    if let Some(src) = &bundle.source {
        let _ = writeln!(md, "Cohort source: {src}\n");
    }

    let main: Vec<&SelectionSummary> = bundle.selections.iter().filter(|s| s.top_fraction == 0.10).collect();
    md.push_str("## Additional admits by alpha\n\n");
    md.push_str("| alpha | additional admits | share of cohort | mean C | published admits | published share | published mean C | match |\n");
    md.push_str("|---|---|---|---|---|---|---|---|\n");
    for s in &main {
        let a = key_num(s.alpha);
        let pa = by_key.get(format!("admits.{a}").as_str());
        let ps = by_key.get(format!("share_pct.{a}").as_str());
        let pc = by_key.get(format!("mean_c.{a}").as_str());
        let all = [pa, ps, pc].iter().flatten().map(|r| r.matched).collect::<Vec<_>>();
        let m = if all.is_empty() { None } else { Some(all.iter().all(|m| *m == Some(true))) };
        let _ = writeln!(
            md,
            "| {} | {} | {:.2}% | {} | {} | {} | {} | {} |",
            s.alpha,
            s.n_conditional,
            s.share_of_cohort * 100.0,
            fmt_opt(s.correction.mean, 2),
            pa.map(|r| r.published.to_string()).unwrap_or_default(),
            ps.map(|r| format!("{}%", r.published)).unwrap_or_default(),
            pc.map(|r| r.published.to_string()).unwrap_or_default(),
            flag(m)
        );
    }

    md.push_str("\n## Quartile composition of conditional admits\n\n| alpha | Q1 | Q2 | Q3 | Q4 |\n|---|---|---|---|---|\n");
    for s in &main {
        let q = s.quartile_composition;
        let _ = writeln!(md, "| {} | {:.0}% | {:.0}% | {:.0}% | {:.0}% |", s.alpha, q.q1 * 100.0, q.q2 * 100.0, q.q3 * 100.0, q.q4 * 100.0);
    }

    md.push_str("\n## Threshold gaps and raw distances\n\n| alpha | min gap | max gap | mean gap | min distance | max distance | mean distance |\n|---|---|---|---|---|---|---|\n");
    for s in &main {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} |",
            s.alpha,
            fmt_opt(s.gap.min, 2),
            fmt_opt(s.gap.max, 2),
            fmt_opt(s.gap.mean, 2),
            fmt_opt(s.delta.min, 2),
            fmt_opt(s.delta.max, 2),
            fmt_opt(s.delta.mean, 2)
        );
    }
    md.push_str(
        "\nNote: the published gap table and raw-distance table list identical min/max/mean triples. \
         Per record, gap = C - distance, so the two generally differ; both are reported here as computed.\n",
    );

    if !bundle.robustness.is_empty() {
        md.push_str("\n## Robustness\n\n| setting | replicates | baseline admits | mean admits | SD | mean Q1 | mean Q2 | mean Q3 | mean Q4 | runs with Q3 | runs with Q4 | gaps >= 0 |\n|---|---|---|---|---|---|---|---|---|---|---|---|\n");
        for r in &bundle.robustness {
            let a = &r.aggregates;
            let q = a.mean_quartile_shares;
            let _ = writeln!(
                md,
                "| {} | {} | {} | {:.2} | {:.2} | {:.1}% | {:.1}% | {:.1}% | {:.1}% | {:.1}% | {:.1}% | {} |",
                r.label,
                r.rows.len(),
                r.baseline_n_conditional,
                a.mean_n_conditional,
                a.sd_n_conditional,
                q.q1 * 100.0,
                q.q2 * 100.0,
                q.q3 * 100.0,
                q.q4 * 100.0,
                a.frac_any_q3 * 100.0,
                a.frac_any_q4 * 100.0,
                a.all_gaps_nonnegative
            );
        }
    }

    if !bundle.weighted.is_empty() {
        md.push_str("\n## Population-weighted estimates\n\n| alpha | admits | weighted admits | weighted bottom-half share | weighted median S |\n|---|---|---|---|---|\n");
        for w in &bundle.weighted {
            let _ = writeln!(
                md,
                "| {} | {} | {:.1} | {:.1}% | {} |",
                w.alpha,
                w.n_conditional,
                w.weighted_n_conditional,
                w.weighted_bottom_half_share * 100.0,
                fmt_opt(w.weighted_median_s, 3)
            );
        }
    }

    if let Some(d) = &bundle.dbn {
        let _ = write!(
            md,
            "\n## Mobility simulation\n\nGenerations: {}. Baseline final Q1 share {:.3}%, intervention {:.3}%, improvement {:.4} pp.\n\
             Matrices are a stylized construction; only the qualitative pattern is comparable.\n",
            d.baseline.occupancy.len() - 1,
            d.baseline.q1_share_final * 100.0,
            d.amf.q1_share_final * 100.0,
            d.improvement_pp
        );
    }

    md.push_str("\n## All published values\n\n| quantity | computed | published | tolerance | source | status |\n|---|---|---|---|---|---|\n");
    for r in &rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} |",
            r.quantity,
            fmt_opt(r.computed, 4),
            r.published,
            r.tolerance,
            r.citation,
            flag(r.matched)
        );
    }
    md
}

pub fn selections_csv(bundle: &ResultsBundle) -> String {
    let mut out = String::from("top_fraction,alpha,threshold,n_regular,n_conditional,share_of_cohort,mean_c,min_c,max_c,q1,q2,q3,q4\n");
    for s in &bundle.selections {
        let q = s.quartile_composition;
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            s.top_fraction,
            s.alpha,
            s.threshold,
            s.n_regular,
            s.n_conditional,
            s.share_of_cohort,
            o(s.correction.mean),
            o(s.correction.min),
            o(s.correction.max),
            q.q1,
            q.q2,
            q.q3,
            q.q4
        );
    }
    out
}

pub fn robustness_csv(reports: &[RobustnessReport]) -> String {
    let mut out = String::from("setting,replicate,threshold,n_conditional,q1,q2,q3,q4,min_gap\n");
    for r in reports {
        out.push_str(r.to_csv().split_once('\n').map(|x| x.1).unwrap_or(""));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
    SvgPlots,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [ReportFormat::Json, ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::SvgPlots];
}

/// Writes the requested formats into `dir`; returns the file names written.
pub fn emit_report(bundle: &ResultsBundle, dir: &Path, formats: &[ReportFormat]) -> std::io::Result<Vec<String>> {
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> std::io::Result<()> {
        fs::write(dir.join(name), body)?;
        written.push(name.to_string());
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Json => {
                put("results.json", serde_json::to_string_pretty(bundle).map_err(std::io::Error::other)? + "\n")?;
                put("comparison.json", serde_json::to_string_pretty(&compare(bundle)).map_err(std::io::Error::other)? + "\n")?;
            }
            ReportFormat::Csv => {
                put("selections.csv", selections_csv(bundle))?;
                put("robustness.csv", robustness_csv(&bundle.robustness))?;
                if let Some(c) = &bundle.curve {
                    put("tradeoff.csv", curve_csv(c))?;
                }
                if let Some(d) = &bundle.dbn {
                    put("dbn_occupancy.csv", d.occupancy_csv())?;
                }
            }
            ReportFormat::Markdown => put("report.md", markdown_report(bundle))?,
            ReportFormat::SvgPlots => {
                if let Some(c) = &bundle.curve {
                    put("tradeoff.svg", tradeoff_svg(c))?;
                }
                let sweep: Vec<(f64, f64)> = bundle
                    .robustness
                    .iter()
                    .filter_map(|r| match r.spec.kind {
                        crate::perturbation::PerturbationKind::TopFraction { top_fraction } => {
                            Some((top_fraction * 100.0, r.rows[0].n_conditional as f64))
                        }
                        _ => None,
                    })
                    .collect();
                if !sweep.is_empty() {
                    put(
                        "threshold_sweep.svg",
                        line_plot("Admits by threshold percentile", "top %", "conditional admits", &[("admits", sweep)], &[]),
                    )?;
                }
                let noise: Vec<&RobustnessReport> =
                    bundle.robustness.iter().filter(|r| r.rows.len() > 1).collect();
                if !noise.is_empty() {
                    let series: Vec<(&str, Vec<(f64, f64)>)> = noise
                        .iter()
                        .map(|r| {
                            (r.label.as_str(), r.rows.iter().map(|row| (row.replicate as f64, row.n_conditional as f64)).collect())
                        })
                        .collect();
                    put("noise_stability.svg", line_plot("Admits per replicate", "replicate", "conditional admits", &series, &[]))?;
                }
                if let Some(d) = &bundle.dbn {
                    put("dbn_trajectories.svg", dbn_svg(d))?;
                }
            }
        }
    }
    Ok(written)
}

pub fn tradeoff_svg(curve: &TradeoffCurve) -> String {
    let pts: Vec<(f64, f64)> = curve.points.iter().map(|p| (p.alpha, p.n_conditional as f64)).collect();
    let mut series = vec![("admits", pts.clone())];
    let mut notes = Vec::new();
    if let Some(fit) = curve.fit {
        let line = pts.iter().map(|(x, _)| (*x, fit.intercept + fit.slope * x)).collect();
        series.push(("fit", line));
        notes.push(format!("slope {:.3}, R2 {:.3}", fit.slope, fit.r_squared));
    }
    line_plot("Conditional admits by alpha", "alpha", "conditional admits", &series, &notes)
}

pub fn dbn_svg(d: &DbnComparison) -> String {
    let q1 = |occ: &[crate::dbn::Dist]| occ.iter().enumerate().map(|(t, o)| (t as f64, o[0] * 100.0)).collect::<Vec<_>>();
    let q4 = |occ: &[crate::dbn::Dist]| occ.iter().enumerate().map(|(t, o)| (t as f64, o[3] * 100.0)).collect::<Vec<_>>();
    line_plot(
        "Tier occupancy over generations",
        "generation",
        "share %",
        &[
            ("baseline tier 1", q1(&d.baseline.occupancy)),
            ("AMF tier 1", q1(&d.amf.occupancy)),
            ("baseline tier 4", q4(&d.baseline.occupancy)),
            ("AMF tier 4", q4(&d.amf.occupancy)),
        ],
        &[format!("improvement {:.4} pp", d.improvement_pp)],
    )
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Minimal deterministic SVG line chart.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)], notes: &[String]) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 70.0, 160.0, 40.0, 50.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        x0 = x0.min(*x);
        x1 = x1.max(*x);
        y0 = y0.min(*y);
        y1 = y1.max(*y);
    }
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(svg, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(svg, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", w / 2.0, esc(title));
    let _ = writeln!(
        svg,
        "<line x1=\"{left}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
        h - bottom,
        w - right,
        h - bottom
    );
    let _ = writeln!(svg, "<line x1=\"{left}\" y1=\"{top}\" x2=\"{left}\" y2=\"{:.2}\" stroke=\"black\"/>", h - bottom);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", px(fx), h - bottom + 16.0, tick(fx));
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", left - 6.0, py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (left + w - right) / 2.0, h - 10.0, esc(x_label));
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
        h / 2.0,
        h / 2.0,
        esc(y_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        if pts.len() <= 12 {
            for (x, y) in pts {
                let _ = writeln!(svg, "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>", px(*x), py(*y));
            }
        }
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(svg, "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", w - right + 10.0, ly);
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", w - right + 24.0, ly + 9.0, esc(name));
    }
    for (i, note) in notes.iter().enumerate() {
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>", left + 8.0, top + 14.0 * (i as f64 + 1.0), esc(note));
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}
