//! Cohort ingestion and SES outlier cleaning.
//!
//! A cohort is read from delimiter-separated text (comma or tab, detected from
//! the header line). A [`ColumnMapping`] names the columns that carry the
//! applicant id, merit score, raw ESCS, sampling weight and the two opt-in
//! flags. Rows with a missing or non-finite merit score or ESCS are dropped and
//! counted; everything downstream requires both.
//!
//! Outliers are removed in a single pass with Tukey fences computed on the
//! ESCS column of the whole loaded cohort.

use std::collections::HashSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unreadable source: {0}")]
    Unreadable(String),

    #[error("missing mapped column `{column}` (mapped as {field})")]
    MissingColumn { field: &'static str, column: String },

    #[error("zero usable rows")]
    NoUsableRows,

    #[error("duplicate applicant id `{0}`")]
    DuplicateId(String),

    #[error("negative sampling weight {weight} for applicant `{id}`")]
    NegativeWeight { id: String, weight: f64 },

    #[error("unrecognised opt-in value `{value}` for applicant `{id}`")]
    BadFlag { id: String, value: String },
}

impl From<csv::Error> for DatasetError {
    fn from(e: csv::Error) -> Self {
        DatasetError::Unreadable(e.to_string())
    }
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Unreadable(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DatasetError>;

/// One applicant as it enters the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApplicantRecord {
    pub id: String,
    /// Raw merit score `M_i`, in score points.
    pub merit_score: f64,
    /// Raw socioeconomic composite (ESCS), dimensionless.
    pub escs_raw: f64,
    /// Survey sampling weight; 1.0 when the source has none.
    pub weight: f64,
    /// Consent to SES disclosure; gates eligibility for correction.
    pub pre_optin: bool,
    /// Consent to post-admission support linkage. Never read by selection.
    pub post_optin: bool,
}

impl ApplicantRecord {
    pub fn new(id: impl Into<String>, merit_score: f64, escs_raw: f64) -> Self {
        Self {
            id: id.into(),
            merit_score,
            escs_raw,
            weight: 1.0,
            pre_optin: true,
            post_optin: true,
        }
    }

    pub fn with_weight(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    pub fn with_pre_optin(mut self, pre_optin: bool) -> Self {
        self.pre_optin = pre_optin;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub records: Vec<ApplicantRecord>,
    pub provenance: String,
    pub n_dropped_missing: usize,
}

impl Cohort {
    /// Builds a cohort from in-memory records, enforcing the same invariants as
    /// [`load_cohort`].
    pub fn from_records(records: Vec<ApplicantRecord>, provenance: impl Into<String>) -> Result<Self> {
        if records.is_empty() {
            return Err(DatasetError::NoUsableRows);
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !r.merit_score.is_finite() || !r.escs_raw.is_finite() {
                return Err(DatasetError::Unreadable(format!(
                    "non-finite merit or ESCS for applicant `{}`",
                    r.id
                )));
            }
            if r.weight < 0.0 || !r.weight.is_finite() {
                return Err(DatasetError::NegativeWeight { id: r.id.clone(), weight: r.weight });
            }
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        Ok(Self { records, provenance: provenance.into(), n_dropped_missing: 0 })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn merit_scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.merit_score).collect()
    }

    pub fn escs_values(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.escs_raw).collect()
    }

    /// Cleaned-cohort export: `id,merit,escs,weight,pre_optin,post_optin`.
    ///
    /// Floats use the shortest representation that round-trips, so the same
    /// cohort always serializes to the same bytes.
    pub fn to_csv_bytes(&self) -> Vec<u8> {
        let mut out = String::from("id,merit,escs,weight,pre_optin,post_optin\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&r.id),
                r.merit_score,
                r.escs_raw,
                r.weight,
                r.pre_optin,
                r.post_optin
            ));
        }
        out.into_bytes()
    }

    /// Reads back a file written by [`Cohort::to_csv_bytes`].
    pub fn from_export_csv<R: Read>(reader: R, provenance: &str) -> Result<Self> {
        load_cohort(reader, &ColumnMapping::export(), provenance)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r', '\t']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Keeps only rows whose `column` equals `value` (e.g. `CNT == KOR`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFilter {
    pub column: String,
    pub value: String,
}

/// Maps logical fields onto source column names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    /// When unmapped, ids are synthesized as `row-<n>` from the 1-based data row.
    pub id: Option<String>,
    pub merit: String,
    pub escs: String,
    pub weight: Option<String>,
    pub pre_optin: Option<String>,
    pub post_optin: Option<String>,
    pub filter: Option<RowFilter>,
    /// Sentinel values treated as missing in the merit and ESCS columns.
    pub missing_codes: Vec<f64>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self::pisa()
    }
}

impl ColumnMapping {
    /// Column names of the PISA 2022 student questionnaire file.
    pub fn pisa() -> Self {
        Self {
            id: Some("CNTSTUID".into()),
            merit: "PV1MATH".into(),
            escs: "ESCS".into(),
            weight: Some("W_FSTUWT".into()),
            pre_optin: None,
            post_optin: None,
            filter: None,
            missing_codes: Vec::new(),
        }
    }

    /// Layout written by [`Cohort::to_csv_bytes`].
    pub fn export() -> Self {
        Self {
            id: Some("id".into()),
            merit: "merit".into(),
            escs: "escs".into(),
            weight: Some("weight".into()),
            pre_optin: Some("pre_optin".into()),
            post_optin: Some("post_optin".into()),
            filter: None,
            missing_codes: Vec::new(),
        }
    }
}

fn detect_delimiter(bytes: &[u8]) -> u8 {
    let header_end = bytes.iter().position(|&b| b == b'\n').unwrap_or(bytes.len());
    let header = &bytes[..header_end];
    let tabs = header.iter().filter(|&&b| b == b'\t').count();
    let commas = header.iter().filter(|&&b| b == b',').count();
    if tabs > commas {
        b'\t'
    } else {
        b','
    }
}

fn parse_value(raw: &str, missing_codes: &[f64]) -> Option<f64> {
    let t = raw.trim();
    if t.is_empty() || matches!(t, "NA" | "N/A" | "NaN" | "nan" | "." | "null" | "NULL") {
        return None;
    }
    let v: f64 = t.parse().ok()?;
    if !v.is_finite() || missing_codes.iter().any(|&c| c == v) {
        return None;
    }
    Some(v)
}

fn parse_flag(raw: &str) -> Option<Option<bool>> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "" | "na" | "." => Some(None),
        "1" | "true" | "yes" | "y" | "t" => Some(Some(true)),
        "0" | "false" | "no" | "n" | "f" => Some(Some(false)),
        _ => None,
    }
}

/// Reads a cohort from delimiter-separated text with a header row.
pub fn load_cohort<R: Read>(mut source: R, schema: &ColumnMapping, provenance: &str) -> Result<Cohort> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    load_cohort_bytes(&bytes, schema, provenance)
}

pub fn load_cohort_path(path: &Path, schema: &ColumnMapping) -> Result<Cohort> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::Unreadable(format!("{}: {e}", path.display())))?;
    load_cohort_bytes(&bytes, schema, &path.display().to_string())
}

pub fn load_cohort_bytes(bytes: &[u8], schema: &ColumnMapping, provenance: &str) -> Result<Cohort> {
    let text = std::str::from_utf8(bytes).map_err(|e| DatasetError::Unreadable(format!("not UTF-8: {e}")))?;
    let text = text.strip_prefix('\u{feff}').unwrap_or(text);
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text.as_bytes()))
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |field: &'static str, name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DatasetError::MissingColumn { field, column: name.to_string() })
    };
    let merit_ix = col("merit", &schema.merit)?;
    let escs_ix = col("escs", &schema.escs)?;
    let id_ix = schema.id.as_deref().map(|c| col("id", c)).transpose()?;
    // a mapped weight column that is absent means unit weights
    let weight_ix = schema.weight.as_deref().and_then(|c| headers.iter().position(|h| h.trim() == c));
    let pre_ix = schema.pre_optin.as_deref().map(|c| col("pre_optin", c)).transpose()?;
    let post_ix = schema.post_optin.as_deref().map(|c| col("post_optin", c)).transpose()?;
    let filter = match &schema.filter {
        Some(f) => Some((col("filter", &f.column)?, f.value.as_str())),
        None => None,
    };

    let mut records = Vec::new();
    let mut dropped = 0usize;
    let mut seen = HashSet::new();
    for (row_no, row) in reader.records().enumerate() {
        let row = row?;
        if let Some((ix, want)) = filter {
            if row.get(ix).map(str::trim) != Some(want) {
                continue;
            }
        }
        let id = match id_ix {
            Some(ix) => row.get(ix).unwrap_or("").trim().to_string(),
            None => format!("row-{}", row_no + 1),
        };
        let merit = row.get(merit_ix).and_then(|v| parse_value(v, &schema.missing_codes));
        let escs = row.get(escs_ix).and_then(|v| parse_value(v, &schema.missing_codes));
        let (Some(merit_score), Some(escs_raw)) = (merit, escs) else {
            dropped += 1;
            continue;
        };
        let weight = weight_ix
            .and_then(|ix| row.get(ix))
            .and_then(|v| parse_value(v, &[]))
            .unwrap_or(1.0);
        if weight < 0.0 {
            return Err(DatasetError::NegativeWeight { id, weight });
        }
        let flag = |ix: Option<usize>| -> Result<bool> {
            let Some(ix) = ix else { return Ok(true) };
            let raw = row.get(ix).unwrap_or("");
            match parse_flag(raw) {
                Some(v) => Ok(v.unwrap_or(true)),
                None => Err(DatasetError::BadFlag { id: id.clone(), value: raw.to_string() }),
            }
        };
        let pre_optin = flag(pre_ix)?;
        let post_optin = flag(post_ix)?;
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        records.push(ApplicantRecord { id, merit_score, escs_raw, weight, pre_optin, post_optin });
    }
    if records.is_empty() {
        return Err(DatasetError::NoUsableRows);
    }
    Ok(Cohort { records, provenance: provenance.to_string(), n_dropped_missing: dropped })
}

/// Sample quantile definitions (Hyndman & Fan numbering).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuartileMethod {
    /// Type 5, piecewise linear with knots at `(k - 0.5) / n`.
    Hazen,
    /// Type 6, `p(n + 1)`.
    Weibull,
    /// Type 7, `1 + p(n - 1)`; the default in R and NumPy.
    #[default]
    Linear,
    /// Type 8, approximately median-unbiased.
    MedianUnbiased,
}

impl QuartileMethod {
    pub const ALL: [QuartileMethod; 4] =
        [QuartileMethod::Hazen, QuartileMethod::Weibull, QuartileMethod::Linear, QuartileMethod::MedianUnbiased];

    pub fn name(self) -> &'static str {
        match self {
            QuartileMethod::Hazen => "hazen",
            QuartileMethod::Weibull => "weibull",
            QuartileMethod::Linear => "linear",
            QuartileMethod::MedianUnbiased => "median-unbiased",
        }
    }
}

impl fmt::Display for QuartileMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for QuartileMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "hazen" | "type5" => Ok(Self::Hazen),
            "weibull" | "type6" => Ok(Self::Weibull),
            "linear" | "type7" => Ok(Self::Linear),
            "median-unbiased" | "type8" => Ok(Self::MedianUnbiased),
            other => Err(format!("unknown quartile method `{other}`")),
        }
    }
}

/// Quantile of an ascending slice. `p` must lie in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], p: f64, method: QuartileMethod) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let n = sorted.len() as f64;
    // 1-based fractional position
    let h = match method {
        QuartileMethod::Hazen => n * p + 0.5,
        QuartileMethod::Weibull => (n + 1.0) * p,
        QuartileMethod::Linear => (n - 1.0) * p + 1.0,
        QuartileMethod::MedianUnbiased => (n + 1.0 / 3.0) * p + 1.0 / 3.0,
    };
    let h = h.clamp(1.0, n);
    let lo = h.floor();
    let frac = h - lo;
    let i = lo as usize - 1;
    if frac == 0.0 || i + 1 >= sorted.len() {
        sorted[i]
    } else {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierReport {
    pub method: QuartileMethod,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_fence: f64,
    pub upper_fence: f64,
    pub removed_ids: Vec<String>,
    pub n_before: usize,
    pub n_after: usize,
}

/// Tukey fences `[q1 - 1.5 iqr, q3 + 1.5 iqr]` over the cohort's ESCS.
pub fn tukey_fences(cohort: &Cohort, method: QuartileMethod) -> (f64, f64, f64, f64) {
    let mut escs = cohort.escs_values();
    escs.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&escs, 0.25, method);
    let q3 = quantile_sorted(&escs, 0.75, method);
    let iqr = q3 - q1;
    (q1, q3, q1 - 1.5 * iqr, q3 + 1.5 * iqr)
}

/// Drops records whose ESCS falls outside `[lower, upper]`, keeping order.
pub fn apply_fences(cohort: &Cohort, lower: f64, upper: f64) -> (Cohort, Vec<String>) {
    let mut kept = Vec::with_capacity(cohort.len());
    let mut removed = Vec::new();
    for r in &cohort.records {
        if r.escs_raw < lower || r.escs_raw > upper {
            removed.push(r.id.clone());
        } else {
            kept.push(r.clone());
        }
    }
    let out = Cohort {
        records: kept,
        provenance: cohort.provenance.clone(),
        n_dropped_missing: cohort.n_dropped_missing,
    };
    (out, removed)
}

/// One-pass Tukey outlier removal on ESCS.
pub fn remove_ses_outliers(cohort: &Cohort, method: QuartileMethod) -> (Cohort, OutlierReport) {
    let (q1, q3, lower_fence, upper_fence) = tukey_fences(cohort, method);
    let (cleaned, removed_ids) = apply_fences(cohort, lower_fence, upper_fence);
    let report = OutlierReport {
        method,
        q1,
        q3,
        iqr: q3 - q1,
        lower_fence,
        upper_fence,
        n_before: cohort.len(),
        n_after: cleaned.len(),
        removed_ids,
    };
    (cleaned, report)
}
