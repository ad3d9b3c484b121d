//! `amf` command-line entry point.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 config or usage error, 3 data
//! error, 4 kill-switch abort, 5 verification failure.

mod config;
mod output;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use amf_core::calibration::{
    calibration_table, curve_csv, feasible_alpha, ses_gradient, tradeoff_curve, CalibrationError, PercentRounding,
};
use amf_core::correction::{apply_correction, CorrectionError, CorrectionPolicy, EmergencyPolicy};
use amf_core::dataset::{load_cohort_bytes, remove_ses_outliers, Cohort, ColumnMapping, DatasetError, OutlierReport, QuartileMethod};
use amf_core::dbn::{compare_baseline_amf, stationary_distribution, DbnError, SesSign};
use amf_core::perturbation::{run_experiment, weighted_estimates, PerturbationError, PerturbationKind, PerturbationSpec, RobustnessReport};
use amf_core::report::{emit_report, robustness_csv, ReportFormat, ResultsBundle};
use amf_core::selection::{indexed_threshold, outcome_csv, select, KRounding, SelectionError};
use amf_core::ses_index::{percentile_rank, reanchor_percentiles, RankMethod, ReferenceDistribution, SesError, SesIndexedCohort};
use amf_core::spine::{digest_of, run_spine, sha256_hex, verify_closure, OptInRegister, SpineConfig, SpineError};
use amf_core::synthetic::{synthetic_cohort, SyntheticSpec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{seed_from, FileConfig};
use output::{RunManifest, Staging};

pub const EXIT_IO: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_KILL_SWITCH: u8 = 4;
pub const EXIT_VERIFY: u8 = 5;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl ToString) -> Failure {
    Failure { code, message: message.to_string() }
}

type Res<T> = Result<T, Failure>;

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        fail(EXIT_IO, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        fail(EXIT_IO, e)
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        fail(EXIT_DATA, e)
    }
}

impl From<SesError> for Failure {
    fn from(e: SesError) -> Self {
        fail(EXIT_DATA, e)
    }
}

impl From<CorrectionError> for Failure {
    fn from(e: CorrectionError) -> Self {
        fail(EXIT_CONFIG, e)
    }
}

impl From<SelectionError> for Failure {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::InvalidFraction(_) | SelectionError::Correction(_) => fail(EXIT_CONFIG, e),
            _ => fail(EXIT_DATA, e),
        }
    }
}

impl From<CalibrationError> for Failure {
    fn from(e: CalibrationError) -> Self {
        match e {
            CalibrationError::EmptyGrid | CalibrationError::NegativeBound(_) => fail(EXIT_CONFIG, e),
            CalibrationError::Selection(s) => s.into(),
            _ => fail(EXIT_DATA, e),
        }
    }
}

impl From<PerturbationError> for Failure {
    fn from(e: PerturbationError) -> Self {
        match e {
            PerturbationError::InvalidSd(_) | PerturbationError::InvalidScale(_) | PerturbationError::NoReplicates => {
                fail(EXIT_CONFIG, e)
            }
            PerturbationError::Selection(s) => s.into(),
            _ => fail(EXIT_DATA, e),
        }
    }
}

impl From<DbnError> for Failure {
    fn from(e: DbnError) -> Self {
        match e {
            DbnError::NotStochastic { .. } | DbnError::BadEntry { .. } | DbnError::BadInitial | DbnError::BadShock => {
                fail(EXIT_CONFIG, e)
            }
            DbnError::Selection(s) => s.into(),
            _ => fail(EXIT_DATA, e),
        }
    }
}

impl From<SpineError> for Failure {
    fn from(e: SpineError) -> Self {
        match e {
            SpineError::KillSwitch(_) => fail(EXIT_KILL_SWITCH, e),
            SpineError::Config(_) | SpineError::Correction(_) | SpineError::RegisterNotFrozen | SpineError::RegisterPhase(_) => {
                fail(EXIT_CONFIG, e)
            }
            SpineError::Io(_) | SpineError::Json(_) => fail(EXIT_IO, e),
            SpineError::Selection(s) => s.into(),
            _ => fail(EXIT_DATA, e),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "amf", version, about = "Equity-corrected, non-displacing selection engine")]
struct Cli {
    /// JSON config with sections data, policy, feasibility, robustness, dbn, spine.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Cap on worker threads for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct DataArgs {
    /// Input CSV or TSV with a header row.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the seeded synthetic cohort instead of --data.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    synthetic_n: Option<usize>,
    #[arg(long)]
    synthetic_seed: Option<u64>,
    #[arg(long)]
    col_merit: Option<String>,
    #[arg(long)]
    col_escs: Option<String>,
    #[arg(long)]
    col_weight: Option<String>,
    #[arg(long)]
    col_id: Option<String>,
    #[arg(long)]
    col_pre_optin: Option<String>,
    /// Sentinel value treated as missing (repeatable).
    #[arg(long = "missing-code")]
    missing_codes: Vec<f64>,
    /// Skip Tukey-fence ESCS outlier removal.
    #[arg(long)]
    keep_outliers: bool,
    #[arg(long)]
    quartile_method: Option<QuartileMethod>,
    #[arg(long)]
    rank_method: Option<RankMethod>,
    /// One-column CSV of reference ESCS values to anchor percentiles.
    #[arg(long)]
    national_reference: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct PolicyArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    top_fraction: Option<f64>,
    /// Comma-separated alpha grid.
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Fit the SES gradient through the origin.
    #[arg(long)]
    no_intercept: bool,
    /// Also export unclamped corrections (diagnostic only; selection stays clamped).
    #[arg(long)]
    allow_negative_correction: bool,
    /// CSV with columns id,e_value,cycle.
    #[arg(long)]
    emergency_file: Option<PathBuf>,
    #[arg(long)]
    emergency_beta: Option<f64>,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Seed for stochastic stages; falls back to the config file, then AMF_SEED.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load, clean and export a cohort.
    Ingest {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Execute the sealed decision spine.
    Run {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        cycle_id: Option<String>,
        /// CSV with columns id,pre_optin registered before the run.
        #[arg(long)]
        optin_file: Option<PathBuf>,
    },
    /// SES gradient and alpha calibration table.
    Calibrate {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Admits and composition across the alpha grid.
    Tradeoff {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Perturbation experiments.
    Robustness {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
        /// Experiment family; omitted runs the configured suite.
        #[arg(long)]
        kind: Option<Kind>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        eta_sd: Option<f64>,
        #[arg(long)]
        s: Option<f64>,
        #[arg(long)]
        points: Option<f64>,
        /// Top fraction for the threshold-percentile experiment.
        #[arg(long)]
        sweep_fraction: Option<f64>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Population-weighted re-aggregation.
    Weighted {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Multi-generation mobility simulation.
    Dbn {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        ses_sign: Option<SignArg>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Re-check a sealed run directory.
    Verify { dir: PathBuf },
    /// Full analysis with the published-value comparison.
    Report {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        policy: PolicyArgs,
        #[command(flatten)]
        out: OutArgs,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    SesNoise,
    ScoreNoise,
    Variance,
    TopFraction,
    ThresholdPoints,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SignArg {
    Declining,
    Rising,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("amf: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_file_config(path: Option<&Path>) -> Res<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| fail(EXIT_CONFIG, format!("{}: {e}", path.display())))
}

fn apply_data_args(cfg: &mut FileConfig, a: &DataArgs) {
    let d = &mut cfg.data;
    if let Some(p) = &a.data {
        d.path = Some(p.clone());
        d.synthetic = false;
    }
    if a.synthetic {
        d.synthetic = true;
    }
    if a.synthetic_n.is_some() {
        d.synthetic_n = a.synthetic_n;
    }
    if a.synthetic_seed.is_some() {
        d.synthetic_seed = a.synthetic_seed;
    }
    if let Some(c) = &a.col_merit {
        d.schema.merit = c.clone();
    }
    if let Some(c) = &a.col_escs {
        d.schema.escs = c.clone();
    }
    if let Some(c) = &a.col_weight {
        d.schema.weight = Some(c.clone());
    }
    if let Some(c) = &a.col_id {
        d.schema.id = Some(c.clone());
    }
    if let Some(c) = &a.col_pre_optin {
        d.schema.pre_optin = Some(c.clone());
    }
    if !a.missing_codes.is_empty() {
        d.schema.missing_codes = a.missing_codes.clone();
    }
    if a.keep_outliers {
        d.remove_outliers = false;
    }
    if let Some(m) = a.quartile_method {
        d.quartile_method = m;
    }
    if let Some(m) = a.rank_method {
        d.rank_method = m;
    }
    if let Some(p) = &a.national_reference {
        d.national_reference = Some(p.clone());
    }
}

fn apply_policy_args(cfg: &mut FileConfig, a: &PolicyArgs) {
    let p = &mut cfg.policy;
    if let Some(v) = a.alpha {
        p.alpha = v;
    }
    if let Some(v) = a.mu {
        p.mu = v;
    }
    if let Some(v) = a.top_fraction {
        p.top_fraction = v;
    }
    if let Some(v) = &a.alphas {
        p.alpha_grid = v.clone();
    }
    if a.no_intercept {
        p.with_intercept = false;
    }
    if a.allow_negative_correction {
        p.allow_negative_correction = true;
    }
    if let Some(v) = &a.emergency_file {
        p.emergency_file = Some(v.clone());
    }
    if a.emergency_beta.is_some() {
        p.emergency_beta = a.emergency_beta;
    }
}

/// Selection always runs with the clamped correction.
fn policy_of(cfg: &FileConfig) -> Res<CorrectionPolicy> {
    let p = CorrectionPolicy::new(cfg.policy.alpha, cfg.policy.mu)?;
    if !(cfg.policy.top_fraction > 0.0 && cfg.policy.top_fraction < 1.0) {
        return Err(fail(EXIT_CONFIG, format!("top_fraction {} outside (0, 1)", cfg.policy.top_fraction)));
    }
    Ok(p)
}

struct Loaded {
    raw: Vec<u8>,
    schema: ColumnMapping,
    input_digest: String,
    cleaned: Cohort,
    outliers: Option<OutlierReport>,
}

fn load_data(cfg: &FileConfig) -> Res<Loaded> {
    let d = &cfg.data;
    let (raw, schema, provenance) = if let Some(path) = d.path.as_ref().filter(|_| !d.synthetic) {
        let raw = fs::read(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
        (raw, d.schema.clone(), path.display().to_string())
    } else if d.synthetic {
        let mut spec = SyntheticSpec::default();
        if let Some(n) = d.synthetic_n {
            spec.n = n;
        }
        if let Some(s) = d.synthetic_seed {
            spec.seed = s;
        }
        (synthetic_cohort(&spec).to_csv_bytes(), ColumnMapping::export(), format!("synthetic(seed={})", spec.seed))
    } else {
        return Err(fail(EXIT_CONFIG, "no input: pass --data <file>, --synthetic, or set data.path in --config"));
    };
    let cohort = load_cohort_bytes(&raw, &schema, &provenance)?;
    let (cleaned, outliers) = if d.remove_outliers {
        let (c, rep) = remove_ses_outliers(&cohort, d.quartile_method);
        (c, Some(rep))
    } else {
        (cohort, None)
    };
    if cleaned.is_empty() {
        return Err(DatasetError::NoUsableRows.into());
    }
    Ok(Loaded { input_digest: sha256_hex(&raw), raw, schema, cleaned, outliers })
}

fn reference_of(cfg: &FileConfig) -> Res<Option<ReferenceDistribution>> {
    let Some(path) = &cfg.data.national_reference else { return Ok(None) };
    let f = fs::File::open(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
    Ok(Some(ReferenceDistribution::from_csv(f, &path.display().to_string())?))
}

fn index(cfg: &FileConfig, cohort: &Cohort) -> Res<SesIndexedCohort> {
    Ok(match reference_of(cfg)? {
        Some(r) => reanchor_percentiles(cohort, &r)?,
        None => percentile_rank(cohort, cfg.data.rank_method)?,
    })
}

fn pretty<T: Serialize>(v: &T) -> Res<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

struct Session {
    cfg: FileConfig,
    seed: u64,
    subcommand: &'static str,
    staging: Staging,
}

impl Session {
    fn open(mut cfg: FileConfig, out: &OutArgs, subcommand: &'static str) -> Res<Self> {
        let env = std::env::var("AMF_SEED").ok();
        let seed = seed_from(out.seed, cfg.seed, env.as_deref()).map_err(|e| fail(EXIT_CONFIG, e))?;
        cfg.seed = Some(seed);
        let staging = Staging::new(&out.out, out.force)?;
        Ok(Self { cfg, seed, subcommand, staging })
    }

    fn write(&self, name: &str, body: impl AsRef<[u8]>) -> Res<()> {
        Ok(self.staging.write(name, body)?)
    }

    fn finish(self, input_digest: Option<String>) -> Res<PathBuf> {
        self.staging.write("resolved_config.json", pretty(&self.cfg)?)?;
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.to_string(),
            config_digest: digest_of(&self.cfg)?,
            input_digest,
            seed: self.seed,
            timestamp: chrono::Utc::now().to_rfc3339(),
            artifacts: Vec::new(),
        };
        Ok(self.staging.commit(manifest)?)
    }
}

fn dispatch(cli: Cli) -> Res<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(fail(EXIT_CONFIG, "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| fail(EXIT_CONFIG, e))?;
    }
    let mut cfg = load_file_config(cli.config.as_deref())?;
    match cli.command {
        Command::Verify { dir } => {
            verify_closure(&dir).map_err(|e| fail(EXIT_VERIFY, format!("{}: {e}", dir.display())))?;
            println!("verified {}", dir.display());
            Ok(())
        }
        Command::Ingest { data, out } => {
            apply_data_args(&mut cfg, &data);
            let s = Session::open(cfg, &out, "ingest")?;
            let l = load_data(&s.cfg)?;
            s.write("cleaned.csv", l.cleaned.to_csv_bytes())?;
            if let Some(rep) = &l.outliers {
                s.write("outliers.json", pretty(rep)?)?;
            }
            println!(
                "records: {} -> {} ({} outliers removed)",
                l.outliers.as_ref().map_or(l.cleaned.len(), |r| r.n_before),
                l.cleaned.len(),
                l.outliers.as_ref().map_or(0, |r| r.removed_ids.len())
            );
            let dir = s.finish(Some(l.input_digest))?;
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Run { data, policy, out, cycle_id, optin_file } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            if let Some(c) = cycle_id {
                cfg.spine.cycle_id = c;
            }
            if optin_file.is_some() {
                cfg.spine.optin_file = optin_file;
            }
            cmd_run(cfg, &out)
        }
        Command::Calibrate { data, policy, out } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            cmd_calibrate(cfg, &out)
        }
        Command::Tradeoff { data, policy, out } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            cmd_tradeoff(cfg, &out)
        }
        Command::Robustness { data, policy, out, kind, sigma, eta_sd, s, points, sweep_fraction, replicates } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            let r = &mut cfg.robustness;
            if let Some(n) = replicates {
                r.replicates = n;
            }
            let kinds = match kind {
                None => suite(&cfg),
                Some(k) => {
                    let one = |flag: Option<f64>, listed: &[f64]| flag.map(|v| vec![v]).unwrap_or_else(|| listed.to_vec());
                    let r = &cfg.robustness;
                    match k {
                        Kind::SesNoise => one(sigma, &r.ses_sigmas).into_iter().map(|sigma| PerturbationKind::SesNoise { sigma }).collect(),
                        Kind::ScoreNoise => {
                            one(eta_sd, &r.score_noise_sds).into_iter().map(|eta_sd| PerturbationKind::ScoreNoise { eta_sd }).collect()
                        }
                        Kind::Variance => one(s, &r.variance_scales).into_iter().map(|s| PerturbationKind::VarianceScale { s }).collect(),
                        Kind::TopFraction => one(sweep_fraction, &r.top_fractions)
                            .into_iter()
                            .map(|top_fraction| PerturbationKind::TopFraction { top_fraction })
                            .collect(),
                        Kind::ThresholdPoints => {
                            one(points, &r.threshold_points).into_iter().map(|points| PerturbationKind::ThresholdPoints { points }).collect()
                        }
                    }
                }
            };
            cmd_robustness(cfg, &out, kinds)
        }
        Command::Weighted { data, policy, out } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            cmd_weighted(cfg, &out)
        }
        Command::Dbn { data, policy, out, generations, ses_sign, trajectories } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            if let Some(g) = generations {
                cfg.dbn.generations = g;
            }
            if let Some(t) = trajectories {
                cfg.dbn.trajectories_per_individual = t;
            }
            match ses_sign {
                Some(SignArg::Declining) => cfg.dbn.ses_sign = SesSign::Declining,
                Some(SignArg::Rising) => cfg.dbn.ses_sign = SesSign::Rising,
                None => {}
            }
            cmd_dbn(cfg, &out)
        }
        Command::Report { data, policy, out } => {
            apply_data_args(&mut cfg, &data);
            apply_policy_args(&mut cfg, &policy);
            cmd_report(cfg, &out)
        }
    }
}

fn read_optins(path: &Path, register: &mut OptInRegister) -> Res<()> {
    let text = fs::read_to_string(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let (id, flag) = line
            .split_once(',')
            .ok_or_else(|| fail(EXIT_DATA, format!("{}: line {} is not `id,pre_optin`", path.display(), i + 1)))?;
        let flag = match flag.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" => true,
            "0" | "false" | "no" => false,
            other => return Err(fail(EXIT_DATA, format!("{}: bad opt-in value `{other}`", path.display()))),
        };
        register.set_pre(id.trim(), flag)?;
    }
    Ok(())
}

fn cmd_run(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "run")?;
    let cfg = &s.cfg;
    policy_of(cfg)?;
    let l = load_data(cfg)?;
    let emergency = match (&cfg.policy.emergency_file, cfg.policy.emergency_beta) {
        (Some(path), Some(beta)) => {
            let f = fs::File::open(path).map_err(|e| fail(EXIT_IO, format!("{}: {e}", path.display())))?;
            Some(EmergencyPolicy::from_csv(f, beta)?)
        }
        (Some(_), None) => return Err(fail(EXIT_CONFIG, "--emergency-file needs --emergency-beta")),
        (None, Some(_)) => return Err(fail(EXIT_CONFIG, "--emergency-beta needs --emergency-file")),
        (None, None) => None,
    };
    let mut spine = SpineConfig {
        schema: l.schema.clone(),
        remove_outliers: cfg.data.remove_outliers,
        quartile_method: cfg.data.quartile_method,
        rank_method: cfg.data.rank_method,
        national_reference: reference_of(cfg)?,
        policy: CorrectionPolicy::new(cfg.policy.alpha, cfg.policy.mu)?,
        emergency,
        top_fraction: cfg.policy.top_fraction,
        k_rounding: cfg.spine.k_rounding,
        alpha_bounds: cfg.spine.alpha_bounds,
        cycle_id: cfg.spine.cycle_id.clone(),
        rng_seed: s.seed,
        ..SpineConfig::default()
    };
    if let Some(list) = &cfg.spine.pii_denylist {
        spine.pii_denylist = list.clone();
    }
    let mut register = OptInRegister::new();
    if let Some(path) = &cfg.spine.optin_file {
        read_optins(path, &mut register)?;
    }
    register.freeze();
    let result = run_spine(&l.raw, &spine, register)?;
    result.persist(s.staging.path())?;
    let o = result.outcome.outcome();
    println!(
        "threshold {:.2} (k = {}); regular {}; conditional {}",
        result.threshold.t,
        result.threshold.k,
        o.regular.len(),
        o.conditional.len()
    );
    println!("seal {}", result.seal.seal_digest);
    let input = result.input_digest.clone();
    let dir = s.finish(Some(input))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_calibrate(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "calibrate")?;
    let cfg = &s.cfg;
    let policy = policy_of(cfg)?;
    let l = load_data(cfg)?;
    let g = ses_gradient(&l.cleaned, cfg.policy.with_intercept)?;
    let rows = calibration_table(&cfg.policy.alpha_grid, &g, PercentRounding::Nearest);
    s.write("gradient.json", pretty(&g)?)?;
    s.write("calibration.json", pretty(&rows)?)?;
    let mut csv = String::from("alpha,max_correction,fraction_of_ses_effect,fraction_percent\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{},{}", r.alpha, r.max_correction, r.fraction_of_ses_effect, r.fraction_percent);
    }
    s.write("calibration.csv", csv)?;
    if cfg.policy.allow_negative_correction {
        let ix = index(cfg, &l.cleaned)?;
        let unclamped = CorrectionPolicy { clamp_nonnegative: false, ..policy };
        let mut csv = String::from("id,S,C_unclamped,M_star_unclamped\n");
        for r in &ix.records {
            let c = apply_correction(r.s, r.record.merit_score, &unclamped)?;
            let _ = writeln!(csv, "{},{},{},{}", r.record.id, r.s, c.c, c.m_star);
        }
        s.write("corrections_unclamped.csv", csv)?;
    }
    println!(
        "gradient {:.4} (R2 {:.4}, sd(ESCS) {:.4}, per-SD effect {:.2})",
        g.beta_gradient, g.r_squared, g.sigma_escs, g.delta_per_sd
    );
    for r in &rows {
        println!("alpha {}: max correction {:.2}, {}% of the per-SD effect", r.alpha, r.max_correction, r.fraction_percent);
    }
    s.finish(Some(l.input_digest))?;
    Ok(())
}

fn cmd_tradeoff(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "tradeoff")?;
    let cfg = &s.cfg;
    let policy = policy_of(cfg)?;
    let l = load_data(cfg)?;
    let ix = index(cfg, &l.cleaned)?;
    if let Some(b) = &cfg.feasibility {
        b.validate()?;
    }
    let curve = tradeoff_curve(&ix, &cfg.policy.alpha_grid, cfg.policy.top_fraction, &policy, cfg.feasibility.as_ref())?;
    s.write("tradeoff.csv", curve_csv(&curve))?;
    s.write("tradeoff.json", pretty(&curve)?)?;
    s.write("tradeoff.svg", amf_core::report::tradeoff_svg(&curve))?;
    if let Some(b) = &cfg.feasibility {
        let feasible = feasible_alpha(&curve, b);
        s.write("feasible_alpha.json", pretty(&feasible)?)?;
        println!("feasible alphas: {feasible:?}");
    }
    for p in &curve.points {
        println!("alpha {}: {} conditional admits", p.alpha, p.n_conditional);
    }
    if let Some(f) = curve.fit {
        println!("linear fit: slope {:.4}, R2 {:.4}", f.slope, f.r_squared);
    }
    s.finish(Some(l.input_digest))?;
    Ok(())
}

fn suite(cfg: &FileConfig) -> Vec<PerturbationKind> {
    let r = &cfg.robustness;
    let mut kinds = Vec::new();
    kinds.extend(r.ses_sigmas.iter().map(|&sigma| PerturbationKind::SesNoise { sigma }));
    kinds.extend(r.score_noise_sds.iter().map(|&eta_sd| PerturbationKind::ScoreNoise { eta_sd }));
    kinds.extend(r.variance_scales.iter().map(|&s| PerturbationKind::VarianceScale { s }));
    kinds.extend(r.top_fractions.iter().map(|&top_fraction| PerturbationKind::TopFraction { top_fraction }));
    kinds.extend(r.threshold_points.iter().map(|&points| PerturbationKind::ThresholdPoints { points }));
    kinds
}

fn robustness_reports(cfg: &FileConfig, seed: u64, cohort: &Cohort, kinds: &[PerturbationKind]) -> Res<Vec<RobustnessReport>> {
    kinds
        .iter()
        .map(|&kind| {
            let mut spec = PerturbationSpec::new(kind, cfg.policy.alpha);
            spec.replicates = cfg.robustness.replicates;
            spec.base_seed = seed;
            spec.mu = cfg.policy.mu;
            spec.top_fraction = cfg.policy.top_fraction;
            spec.rank_method = cfg.data.rank_method;
            Ok(run_experiment(cohort, &spec)?)
        })
        .collect()
}

fn cmd_robustness(cfg: FileConfig, out: &OutArgs, kinds: Vec<PerturbationKind>) -> Res<()> {
    let s = Session::open(cfg, out, "robustness")?;
    let cfg = &s.cfg;
    policy_of(cfg)?;
    let l = load_data(cfg)?;
    let reports = robustness_reports(cfg, s.seed, &l.cleaned, &kinds)?;
    s.write("robustness.csv", robustness_csv(&reports))?;
    s.write("robustness.json", pretty(&reports)?)?;
    for r in &reports {
        let a = &r.aggregates;
        if r.rows.len() == 1 {
            println!("{}: {} conditional admits (baseline {})", r.label, r.rows[0].n_conditional, r.baseline_n_conditional);
        } else {
            println!(
                "{}: mean {:.2} conditional admits (sd {:.2}, baseline {}), Q4 share {:.3}, Q3 share {:.3}",
                r.label,
                a.mean_n_conditional,
                a.sd_n_conditional,
                r.baseline_n_conditional,
                a.mean_quartile_shares.q4,
                a.mean_quartile_shares.q3
            );
        }
    }
    s.finish(Some(l.input_digest))?;
    Ok(())
}

fn weighted_reports(cfg: &FileConfig, ix: &SesIndexedCohort, policy: &CorrectionPolicy) -> Res<Vec<amf_core::perturbation::WeightedReport>> {
    let threshold = indexed_threshold(ix, cfg.policy.top_fraction, cfg.spine.k_rounding)?;
    cfg.policy
        .alpha_grid
        .iter()
        .map(|&alpha| Ok(weighted_estimates(ix, &threshold, &CorrectionPolicy { alpha, ..*policy })?))
        .collect()
}

fn cmd_weighted(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "weighted")?;
    let cfg = &s.cfg;
    let policy = policy_of(cfg)?;
    let l = load_data(cfg)?;
    let ix = index(cfg, &l.cleaned)?;
    let reports = weighted_reports(cfg, &ix, &policy)?;
    s.write("weighted.json", pretty(&reports)?)?;
    for w in &reports {
        println!(
            "alpha {}: {} admits, weighted {:.1}, bottom-half share {:.1}%",
            w.alpha,
            w.n_conditional,
            w.weighted_n_conditional,
            w.weighted_bottom_half_share * 100.0
        );
    }
    s.finish(Some(l.input_digest))?;
    Ok(())
}

fn cmd_dbn(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "dbn")?;
    let cfg = &s.cfg;
    let policy = policy_of(cfg)?;
    cfg.dbn.validate()?;
    let l = load_data(cfg)?;
    let ix = index(cfg, &l.cleaned)?;
    let d = compare_baseline_amf(&cfg.dbn, &ix, &policy, cfg.policy.top_fraction, s.seed)?;
    s.write("dbn.json", pretty(&d)?)?;
    s.write("dbn_occupancy.csv", d.occupancy_csv())?;
    s.write("dbn_trajectories.svg", amf_core::report::dbn_svg(&d))?;
    let stationary = serde_json::json!({
        "base_matrix": stationary_distribution(&cfg.dbn.base_matrix, 1e-12, 100_000),
        "admit_matrix": stationary_distribution(&cfg.dbn.admit_matrix, 1e-12, 100_000),
    });
    s.write("stationary.json", pretty(&stationary)?)?;
    println!(
        "final tier-1 share: baseline {:.3}%, intervention {:.3}% (improvement {:.4} pp)",
        d.baseline.q1_share_final * 100.0,
        d.amf.q1_share_final * 100.0,
        d.improvement_pp
    );
    s.finish(Some(l.input_digest))?;
    Ok(())
}

fn cmd_report(cfg: FileConfig, out: &OutArgs) -> Res<()> {
    let s = Session::open(cfg, out, "report")?;
    let cfg = &s.cfg;
    let policy = policy_of(cfg)?;
    let l = load_data(cfg)?;
    let ix = index(cfg, &l.cleaned)?;

    let mut fractions = vec![cfg.policy.top_fraction];
    for &f in &cfg.robustness.top_fractions {
        if !fractions.contains(&f) {
            fractions.push(f);
        }
    }
    let mut selections = Vec::new();
    for &f in &fractions {
        let threshold = indexed_threshold(&ix, f, KRounding::default())?;
        for &alpha in &cfg.policy.alpha_grid {
            let o = select(&ix, &threshold, &CorrectionPolicy { alpha, ..policy }, None)?;
            if f == cfg.policy.top_fraction {
                s.write(&format!("outcome_alpha_{alpha}.csv"), outcome_csv(&o))?;
            }
            selections.push(o.summary());
        }
    }
    let gradient = ses_gradient(&l.cleaned, cfg.policy.with_intercept)?;
    let bundle = ResultsBundle {
        source: Some(l.cleaned.provenance.clone()),
        cleaning: l.outliers.clone(),
        calibration: calibration_table(&cfg.policy.alpha_grid, &gradient, PercentRounding::Nearest),
        gradient: Some(gradient),
        selections,
        curve: Some(tradeoff_curve(&ix, &cfg.policy.alpha_grid, cfg.policy.top_fraction, &policy, cfg.feasibility.as_ref())?),
        robustness: robustness_reports(cfg, s.seed, &l.cleaned, &suite(cfg))?,
        weighted: weighted_reports(cfg, &ix, &policy)?,
        dbn: Some(compare_baseline_amf(&cfg.dbn, &ix, &policy, cfg.policy.top_fraction, s.seed)?),
    };
    emit_report(&bundle, s.staging.path(), &ReportFormat::ALL)?;
    let rows = amf_core::report::compare(&bundle);
    let matched = rows.iter().filter(|r| r.matched == Some(true)).count();
    let compared = rows.iter().filter(|r| r.matched.is_some()).count();
    println!("published values matched: {matched}/{compared}");
    s.finish(Some(l.input_digest))?;
    Ok(())
}
