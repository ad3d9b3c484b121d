//! Five-stage decision spine with kill-switch checks, a hash-chained audit
//! trail and a closure seal.
//!
//! Stages run in a fixed order: input, aggregation, calibration, execution,
//! closure. Each stage hands the next one serialized bytes plus their digest;
//! the receiving stage re-hashes before use, so a flipped byte between stages
//! aborts the run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::{CorrectionError, CorrectionPolicy, EmergencyPolicy};
use crate::dataset::{load_cohort_bytes, remove_ses_outliers, Cohort, ColumnMapping, DatasetError, OutlierReport, QuartileMethod};
use crate::selection::{
    indexed_threshold, outcome_csv, select, vacancy_fill, CapacityEvent, KRounding, SelectionError, SelectionOutcome,
    ThresholdSpec, VacancyLedger,
};
use crate::ses_index::{percentile_rank, reanchor_percentiles, RankMethod, ReferenceDistribution, SesError, SesIndexedCohort};

pub const STAGES: [Stage; 5] = [Stage::Input, Stage::Aggregation, Stage::Calibration, Stage::Execution, Stage::Closure];

pub const CONFIG_FILE: &str = "config.json";
pub const COHORT_FILE: &str = "cleaned.csv";
pub const OUTCOME_FILE: &str = "outcome.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TRAIL_FILE: &str = "audit.jsonl";
pub const SEAL_FILE: &str = "seal.json";
pub const OUTLIER_FILE: &str = "outliers.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Input,
    Aggregation,
    Calibration,
    Execution,
    Closure,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Input => "input",
            Stage::Aggregation => "aggregation",
            Stage::Calibration => "calibration",
            Stage::Execution => "execution",
            Stage::Closure => "closure",
        }
    }
}

/// Reasons the kill-switch halts a run. It never edits outcomes.
#[derive(Debug, Error, PartialEq)]
pub enum KillSwitch {
    #[error("alpha {alpha} outside predefined bounds [{lo}, {hi}]")]
    AlphaOutOfBounds { alpha: f64, lo: f64, hi: f64 },
    #[error("digest mismatch at {stage}: expected {expected}, found {actual}")]
    DigestMismatch { stage: &'static str, expected: String, actual: String },
    #[error("emergency module bound to cycle `{sunset_cycle}` but run is cycle `{cycle}`")]
    EmergencySunset { sunset_cycle: String, cycle: String },
}

#[derive(Debug, Error)]
pub enum SpineError {
    #[error("kill-switch: {0}")]
    KillSwitch(#[from] KillSwitch),
    #[error("opt-in register must be frozen before the run")]
    RegisterNotFrozen,
    #[error("opt-in register is {0:?}; operation not allowed")]
    RegisterPhase(RegisterPhase),
    #[error("outcome is sealed; {0} rejected")]
    Sealed(&'static str),
    #[error("invalid spine config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Ses(#[from] SesError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum VerifyError {
    #[error("missing artifact `{0}`")]
    MissingArtifact(String),
    #[error("malformed artifact `{file}`: {reason}")]
    Malformed { file: String, reason: String },
    #[error("seal mismatch: {0}")]
    SealMismatch(String),
    #[error("audit chain broken at seq {seq}: {reason}")]
    BrokenChain { seq: usize, reason: String },
    #[error("cleaned cohort digest does not match the seal")]
    CohortMismatch,
    #[error("outcome diverges at record `{id}`")]
    RecordDivergence { id: String },
    #[error("re-derived outcome digest does not match the seal")]
    OutcomeDigest,
    #[error("summary does not match the re-derived outcome")]
    SummaryMismatch,
    #[error("outlier report does not match the audit trail")]
    OutlierMismatch,
    #[error("re-derivation failed: {0}")]
    Rederive(String),
}

/// Serializes through `serde_json::Value`, whose maps are key-sorted, with
/// shortest round-trip floats.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    serde_json::to_string(&serde_json::to_value(value)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_of<T: Serialize>(value: &T) -> Result<String, serde_json::Error> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpineConfig {
    pub schema: ColumnMapping,
    pub remove_outliers: bool,
    pub quartile_method: QuartileMethod,
    pub rank_method: RankMethod,
    /// External ESCS sample to anchor percentiles; `None` ranks within the cohort.
    pub national_reference: Option<ReferenceDistribution>,
    pub policy: CorrectionPolicy,
    pub emergency: Option<EmergencyPolicy>,
    pub top_fraction: f64,
    pub k_rounding: KRounding,
    pub alpha_bounds: (f64, f64),
    pub cycle_id: String,
    pub rng_seed: u64,
    /// Field names that must never appear in the audit trail.
    pub pii_denylist: Vec<String>,
}

impl Default for SpineConfig {
    fn default() -> Self {
        Self {
            schema: ColumnMapping::pisa(),
            remove_outliers: true,
            quartile_method: QuartileMethod::default(),
            rank_method: RankMethod::default(),
            national_reference: None,
            policy: CorrectionPolicy::default(),
            emergency: None,
            top_fraction: 0.10,
            k_rounding: KRounding::default(),
            alpha_bounds: (0.0, 15.0),
            cycle_id: "cycle-1".into(),
            rng_seed: 0,
            pii_denylist: ["CNTSTUID", "id", "name", "student_name", "birth_date", "address", "email", "phone"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl SpineConfig {
    pub fn digest(&self) -> String {
        digest_of(self).expect("config serializes")
    }

    fn validate(&self) -> Result<(), SpineError> {
        let (lo, hi) = self.alpha_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(SpineError::Config(format!("alpha_bounds ({lo}, {hi}) is not an interval")));
        }
        if !(self.top_fraction > 0.0 && self.top_fraction < 1.0) {
            return Err(SpineError::Config(format!("top_fraction {} outside (0, 1)", self.top_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegisterPhase {
    Open,
    Frozen,
    Closed,
}

/// Opt-in decisions. `pre_spine` gates correction eligibility and is frozen
/// before the run; `post_spine` (support linkage) opens only after closure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptInRegister {
    pre_spine: BTreeMap<String, bool>,
    post_spine: BTreeMap<String, bool>,
    phase: RegisterPhase,
}

impl Default for OptInRegister {
    fn default() -> Self {
        Self::new()
    }
}

impl OptInRegister {
    pub fn new() -> Self {
        Self { pre_spine: BTreeMap::new(), post_spine: BTreeMap::new(), phase: RegisterPhase::Open }
    }

    pub fn phase(&self) -> RegisterPhase {
        self.phase
    }

    pub fn set_pre(&mut self, id: impl Into<String>, optin: bool) -> Result<(), SpineError> {
        if self.phase != RegisterPhase::Open {
            return Err(SpineError::RegisterPhase(self.phase));
        }
        self.pre_spine.insert(id.into(), optin);
        Ok(())
    }

    pub fn freeze(&mut self) {
        if self.phase == RegisterPhase::Open {
            self.phase = RegisterPhase::Frozen;
        }
    }

    pub fn set_post(&mut self, id: impl Into<String>, optin: bool) -> Result<(), SpineError> {
        if self.phase != RegisterPhase::Closed {
            return Err(SpineError::RegisterPhase(self.phase));
        }
        self.post_spine.insert(id.into(), optin);
        Ok(())
    }

    /// Registered pre-spine decision, if any; otherwise the record's own flag applies.
    pub fn pre(&self, id: &str) -> Option<bool> {
        self.pre_spine.get(id).copied()
    }

    pub fn post(&self, id: &str) -> Option<bool> {
        self.post_spine.get(id).copied()
    }

    pub fn post_spine(&self) -> &BTreeMap<String, bool> {
        &self.post_spine
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: usize,
    pub stage: Stage,
    /// Digest of the artifact the stage produced.
    pub content: String,
    /// `sha256(prev | stage | seq | content)`.
    pub digest: String,
    pub prev: String,
}

fn chain_digest(prev: &str, stage: Stage, seq: usize, content: &str) -> String {
    sha256_hex(format!("{prev}|{}|{seq}|{content}", stage.name()).as_bytes())
}

/// Outlier report bytes exactly as persisted.
fn outlier_bytes(rep: &OutlierReport) -> Result<Vec<u8>, serde_json::Error> {
    Ok((serde_json::to_string_pretty(rep)? + "\n").into_bytes())
}

/// Aggregation entry content: the cleaned-cohort digest, bound to the
/// outlier report digest when cleaning ran.
fn aggregation_content(cleaned_digest: &str, outliers_digest: Option<&str>) -> String {
    match outliers_digest {
        None => cleaned_digest.to_string(),
        Some(o) => sha256_hex(format!("{cleaned_digest}|{o}").as_bytes()),
    }
}

const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTrail {
    entries: Vec<AuditEntry>,
}

impl AuditTrail {
    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn head(&self) -> &str {
        self.entries.last().map(|e| e.digest.as_str()).unwrap_or(GENESIS)
    }

    fn append(&mut self, stage: Stage, content: String) {
        let seq = self.entries.len();
        let prev = self.head().to_string();
        let digest = chain_digest(&prev, stage, seq, &content);
        self.entries.push(AuditEntry { seq, stage, content, digest, prev });
    }

    pub fn to_jsonl(&self) -> String {
        self.entries.iter().map(|e| canonical_json(e).expect("entry serializes") + "\n").collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let entries =
            text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(Self { entries })
    }

    /// Checks sequence numbers, spine order, prev links and every digest.
    pub fn verify(&self) -> Result<(), VerifyError> {
        if self.entries.len() != STAGES.len() {
            return Err(VerifyError::BrokenChain {
                seq: self.entries.len().min(STAGES.len()),
                reason: format!("expected {} entries, found {}", STAGES.len(), self.entries.len()),
            });
        }
        let mut prev = GENESIS.to_string();
        for (i, (e, expected)) in self.entries.iter().zip(STAGES).enumerate() {
            let broken = |reason: String| Err(VerifyError::BrokenChain { seq: i, reason });
            if e.seq != i {
                return broken(format!("sequence number {}", e.seq));
            }
            if e.stage != expected {
                return broken(format!("stage {} where {} belongs", e.stage.name(), expected.name()));
            }
            if e.prev != prev {
                return broken("prev does not match preceding digest".into());
            }
            if e.digest != chain_digest(&e.prev, e.stage, e.seq, &e.content) {
                return broken("entry digest does not recompute".into());
            }
            prev = e.digest.clone();
        }
        Ok(())
    }

    /// Object keys in the trail that appear on the denylist.
    pub fn pii_scan(&self, denylist: &[String]) -> Vec<String> {
        let mut hits = Vec::new();
        for line in self.to_jsonl().lines() {
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(line) {
                for key in map.keys() {
                    if denylist.iter().any(|d| d.eq_ignore_ascii_case(key)) {
                        hits.push(key.clone());
                    }
                }
            }
        }
        hits
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureSeal {
    pub config_digest: String,
    pub cohort_digest: String,
    pub outcome_digest: String,
    /// Digest of the execution entry, the last one before closure.
    pub trail_head: String,
    pub seal_digest: String,
    pub sealed_at_stage: Stage,
}

impl ClosureSeal {
    fn compute(config_digest: &str, cohort_digest: &str, outcome_digest: &str, trail_head: &str) -> String {
        sha256_hex(format!("{config_digest}|{cohort_digest}|{outcome_digest}|{trail_head}").as_bytes())
    }

    fn new(config_digest: String, cohort_digest: String, outcome_digest: String, trail_head: String) -> Self {
        let seal_digest = Self::compute(&config_digest, &cohort_digest, &outcome_digest, &trail_head);
        Self { config_digest, cohort_digest, outcome_digest, trail_head, seal_digest, sealed_at_stage: Stage::Closure }
    }

    pub fn recompute(&self) -> String {
        Self::compute(&self.config_digest, &self.cohort_digest, &self.outcome_digest, &self.trail_head)
    }
}

/// Bytes handed from aggregation to the later stages.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedArtifacts {
    pub input_digest: String,
    /// Cleaned cohort export with pre-spine opt-ins applied.
    pub cleaned_csv: Vec<u8>,
    pub cleaned_digest: String,
    pub outliers: Option<OutlierReport>,
    pub n_raw: usize,
    trail: AuditTrail,
}

/// Pre-execution and pre-closure gate. Only ever permits or halts.
pub fn validate_killswitch(config: &SpineConfig, staged: &StagedArtifacts) -> Result<(), KillSwitch> {
    let (lo, hi) = config.alpha_bounds;
    let alpha = config.policy.alpha;
    if !(alpha >= lo && alpha <= hi) {
        return Err(KillSwitch::AlphaOutOfBounds { alpha, lo, hi });
    }
    let actual = sha256_hex(&staged.cleaned_csv);
    if actual != staged.cleaned_digest {
        return Err(KillSwitch::DigestMismatch { stage: "aggregation", expected: staged.cleaned_digest.clone(), actual });
    }
    if let Some(em) = &config.emergency {
        if em.sunset_cycle != config.cycle_id {
            return Err(KillSwitch::EmergencySunset { sunset_cycle: em.sunset_cycle.clone(), cycle: config.cycle_id.clone() });
        }
    }
    Ok(())
}

/// Input and aggregation stages.
pub fn stage_inputs(raw: &[u8], config: &SpineConfig, optins: &OptInRegister) -> Result<StagedArtifacts, SpineError> {
    config.validate()?;
    if optins.phase() == RegisterPhase::Open {
        return Err(SpineError::RegisterNotFrozen);
    }
    let mut trail = AuditTrail::default();

    let input_digest = sha256_hex(raw);
    let mut cohort = load_cohort_bytes(raw, &config.schema, "spine-input")?;
    for r in &mut cohort.records {
        if let Some(flag) = optins.pre(&r.id) {
            r.pre_optin = flag;
        }
        // support linkage never reaches the sealed artifacts
        r.post_optin = false;
    }
    let n_raw = cohort.len();
    trail.append(Stage::Input, input_digest.clone());

    let (cleaned, outliers) = if config.remove_outliers {
        let (c, rep) = remove_ses_outliers(&cohort, config.quartile_method);
        (c, Some(rep))
    } else {
        (cohort, None)
    };
    if cleaned.is_empty() {
        return Err(SpineError::Dataset(DatasetError::NoUsableRows));
    }
    let cleaned_csv = cleaned.to_csv_bytes();
    let cleaned_digest = sha256_hex(&cleaned_csv);
    let outliers_digest = outliers.as_ref().map(|r| outlier_bytes(r).map(|b| sha256_hex(&b))).transpose()?;
    trail.append(Stage::Aggregation, aggregation_content(&cleaned_digest, outliers_digest.as_deref()));

    Ok(StagedArtifacts { input_digest, cleaned_csv, cleaned_digest, outliers, n_raw, trail })
}

fn index_cohort(cohort: &Cohort, config: &SpineConfig) -> Result<SesIndexedCohort, SesError> {
    match &config.national_reference {
        Some(reference) => reanchor_percentiles(cohort, reference),
        None => percentile_rank(cohort, config.rank_method),
    }
}

/// Selection from the sealed inputs alone; also used by verification.
fn derive_outcome(cleaned_csv: &[u8], config: &SpineConfig) -> Result<(SesIndexedCohort, SelectionOutcome), SpineError> {
    let cohort = Cohort::from_export_csv(cleaned_csv, "cleaned")?;
    let indexed = index_cohort(&cohort, config)?;
    let threshold = indexed_threshold(&indexed, config.top_fraction, config.k_rounding)?;
    let emergency = config.emergency.as_ref().map(|e| e.activate(&config.cycle_id)).transpose()?;
    let outcome = select(&indexed, &threshold, &config.policy, emergency.as_ref())?;
    Ok((indexed, outcome))
}

/// Calibration, execution and closure stages over staged inputs.
pub fn execute_staged(staged: StagedArtifacts, config: &SpineConfig, mut optins: OptInRegister) -> Result<SpineResult, SpineError> {
    validate_killswitch(config, &staged)?;
    let mut trail = staged.trail.clone();

    let config_digest = config.digest();
    let cohort = Cohort::from_export_csv(staged.cleaned_csv.as_slice(), "cleaned")?;
    let indexed = index_cohort(&cohort, config)?;
    let threshold = indexed_threshold(&indexed, config.top_fraction, config.k_rounding)?;
    config.policy.validate()?;
    trail.append(Stage::Calibration, digest_of(&(&config_digest, &threshold))?);

    let (_, outcome) = derive_outcome(&staged.cleaned_csv, config)?;
    let outcome_digest = digest_of(&outcome)?;
    trail.append(Stage::Execution, outcome_digest.clone());

    validate_killswitch(config, &staged)?;
    let seal = ClosureSeal::new(config_digest, staged.cleaned_digest.clone(), outcome_digest, trail.head().to_string());
    trail.append(Stage::Closure, seal.seal_digest.clone());
    optins.phase = RegisterPhase::Closed;

    Ok(SpineResult {
        config: config.clone(),
        outcome: SealedOutcome { outcome, ranking_frozen: true },
        threshold,
        trail,
        seal,
        cleaned_csv: staged.cleaned_csv,
        outliers: staged.outliers,
        input_digest: staged.input_digest,
        n_raw: staged.n_raw,
        optins,
    })
}

pub fn run_spine(raw: &[u8], config: &SpineConfig, optins: OptInRegister) -> Result<SpineResult, SpineError> {
    let staged = stage_inputs(raw, config, &optins)?;
    execute_staged(staged, config, optins)
}

/// A selection outcome after closure. Reads are free; writes are refused.
#[derive(Debug, Clone, PartialEq)]
pub struct SealedOutcome {
    outcome: SelectionOutcome,
    ranking_frozen: bool,
}

impl SealedOutcome {
    pub fn outcome(&self) -> &SelectionOutcome {
        &self.outcome
    }

    pub fn add_admit(&mut self, _id: &str) -> Result<(), SpineError> {
        Err(SpineError::Sealed("add_admit"))
    }

    pub fn remove_admit(&mut self, _id: &str) -> Result<(), SpineError> {
        Err(SpineError::Sealed("remove_admit"))
    }

    pub fn set_threshold(&mut self, _t: f64) -> Result<(), SpineError> {
        Err(SpineError::Sealed("set_threshold"))
    }

    pub fn rerank(&mut self) -> Result<(), SpineError> {
        Err(SpineError::Sealed("rerank"))
    }

    /// Withdrawals and added seats go to a separate ledger over the frozen ranking.
    pub fn vacancy(&self, events: &[CapacityEvent]) -> Result<VacancyLedger, SelectionError> {
        debug_assert!(self.ranking_frozen);
        vacancy_fill(&self.outcome, &self.outcome.ranking, events)
    }
}

#[derive(Debug, Clone)]
pub struct SpineResult {
    pub config: SpineConfig,
    pub outcome: SealedOutcome,
    pub threshold: ThresholdSpec,
    pub trail: AuditTrail,
    pub seal: ClosureSeal,
    pub cleaned_csv: Vec<u8>,
    pub outliers: Option<OutlierReport>,
    pub input_digest: String,
    pub n_raw: usize,
    /// Register after closure; only post-spine entries are writable.
    pub optins: OptInRegister,
}

impl SpineResult {
    /// Writes every artifact into `dir` (which must exist).
    pub fn persist(&self, dir: &Path) -> Result<(), SpineError> {
        fs::write(dir.join(CONFIG_FILE), pretty_bytes(&self.config))?;
        fs::write(dir.join(COHORT_FILE), &self.cleaned_csv)?;
        fs::write(dir.join(OUTCOME_FILE), outcome_csv(self.outcome.outcome()))?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&self.outcome.outcome().summary())? + "\n")?;
        fs::write(dir.join(TRAIL_FILE), self.trail.to_jsonl())?;
        fs::write(dir.join(SEAL_FILE), pretty_bytes(&self.seal))?;
        if let Some(rep) = &self.outliers {
            fs::write(dir.join(OUTLIER_FILE), outlier_bytes(rep)?)?;
        }
        Ok(())
    }
}

fn pretty_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    (serde_json::to_string_pretty(value).expect("artifact serializes") + "\n").into_bytes()
}

fn read_artifact(dir: &Path, name: &str) -> Result<Vec<u8>, VerifyError> {
    fs::read(dir.join(name)).map_err(|_| VerifyError::MissingArtifact(name.to_string()))
}

fn malformed(file: &str, reason: impl ToString) -> VerifyError {
    VerifyError::Malformed { file: file.to_string(), reason: reason.to_string() }
}

/// Re-checks a persisted run: seal, config, chain, cohort, then a fresh
/// re-derivation compared row by row against the outcome file.
pub fn verify_closure(dir: &Path) -> Result<(), VerifyError> {
    let seal_bytes = read_artifact(dir, SEAL_FILE)?;
    let seal: ClosureSeal = serde_json::from_slice(&seal_bytes).map_err(|e| malformed(SEAL_FILE, e))?;
    if pretty_bytes(&seal) != seal_bytes {
        return Err(malformed(SEAL_FILE, "not the canonical serialization"));
    }
    if seal.sealed_at_stage != Stage::Closure {
        return Err(VerifyError::SealMismatch("seal not taken at closure".into()));
    }
    if seal.recompute() != seal.seal_digest {
        return Err(VerifyError::SealMismatch("seal digest does not recompute from its components".into()));
    }

    let config_bytes = read_artifact(dir, CONFIG_FILE)?;
    let config: SpineConfig = serde_json::from_slice(&config_bytes).map_err(|e| malformed(CONFIG_FILE, e))?;
    // unknown or dropped keys can parse to the same value, so compare bytes too
    if config.digest() != seal.config_digest || pretty_bytes(&config) != config_bytes {
        return Err(VerifyError::SealMismatch("config differs from the sealed config".into()));
    }

    let trail_text = String::from_utf8(read_artifact(dir, TRAIL_FILE)?).map_err(|e| malformed(TRAIL_FILE, e))?;
    let trail = AuditTrail::from_jsonl(&trail_text).map_err(|e| malformed(TRAIL_FILE, e))?;
    trail.verify()?;
    if trail.to_jsonl() != trail_text {
        return Err(malformed(TRAIL_FILE, "not the canonical serialization"));
    }
    let entries = trail.entries();
    if entries[3].digest != seal.trail_head {
        return Err(VerifyError::BrokenChain { seq: 3, reason: "execution entry is not the sealed head".into() });
    }
    if entries[4].content != seal.seal_digest {
        return Err(VerifyError::BrokenChain { seq: 4, reason: "closure entry does not carry the seal".into() });
    }

    let cleaned = read_artifact(dir, COHORT_FILE)?;
    let cohort_digest = sha256_hex(&cleaned);
    if cohort_digest != seal.cohort_digest {
        return Err(VerifyError::CohortMismatch);
    }
    let outliers_digest = if config.remove_outliers {
        let bytes = read_artifact(dir, OUTLIER_FILE)?;
        Some(sha256_hex(&bytes))
    } else {
        None
    };
    if entries[1].content != aggregation_content(&cohort_digest, outliers_digest.as_deref()) {
        return Err(if outliers_digest.is_some() { VerifyError::OutlierMismatch } else { VerifyError::CohortMismatch });
    }

    let (_, outcome) = derive_outcome(&cleaned, &config).map_err(|e| VerifyError::Rederive(e.to_string()))?;
    let persisted = String::from_utf8(read_artifact(dir, OUTCOME_FILE)?).map_err(|e| malformed(OUTCOME_FILE, e))?;
    let expected_csv = outcome_csv(&outcome);
    compare_outcome_rows(&expected_csv, &persisted)?;
    if persisted != expected_csv {
        return Err(malformed(OUTCOME_FILE, "header or line endings differ from the canonical export"));
    }

    let digest = digest_of(&outcome).map_err(|e| VerifyError::Rederive(e.to_string()))?;
    if digest != seal.outcome_digest || entries[3].content != digest {
        return Err(VerifyError::OutcomeDigest);
    }
    let summary = serde_json::to_string_pretty(&outcome.summary()).map_err(|e| VerifyError::Rederive(e.to_string()))? + "\n";
    if read_artifact(dir, SUMMARY_FILE)? != summary.as_bytes() {
        return Err(VerifyError::SummaryMismatch);
    }
    Ok(())
}

fn row_id(line: &str) -> String {
    // ids containing commas are quoted by the exporter
    if let Some(rest) = line.strip_prefix('"') {
        let mut id = String::new();
        let mut chars = rest.chars().peekable();
        while let Some(c) = chars.next() {
            if c == '"' {
                if chars.peek() == Some(&'"') {
                    id.push('"');
                    chars.next();
                } else {
                    break;
                }
            } else {
                id.push(c);
            }
        }
        id
    } else {
        line.split(',').next().unwrap_or("").to_string()
    }
}

fn compare_outcome_rows(expected: &str, persisted: &str) -> Result<(), VerifyError> {
    let exp: Vec<&str> = expected.lines().skip(1).collect();
    let got: Vec<&str> = persisted.lines().skip(1).filter(|l| !l.is_empty()).collect();
    let got_by_id: BTreeMap<String, &str> = got.iter().map(|l| (row_id(l), *l)).collect();
    for line in &exp {
        let id = row_id(line);
        if got_by_id.get(&id) != Some(line) {
            return Err(VerifyError::RecordDivergence { id });
        }
    }
    let exp_ids: std::collections::BTreeSet<String> = exp.iter().map(|l| row_id(l)).collect();
    for line in &got {
        let id = row_id(line);
        if !exp_ids.contains(&id) {
            return Err(VerifyError::RecordDivergence { id });
        }
    }
    if exp != got {
        // same rows, different order
        let id = exp.iter().zip(&got).find(|(a, b)| a != b).map(|(a, _)| row_id(a)).unwrap_or_default();
        return Err(VerifyError::RecordDivergence { id });
    }
    Ok(())
}
