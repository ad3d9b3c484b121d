//! JSON config file layout and flag-over-file resolution.
//!
//! Precedence, highest first: command-line flag, config file value, the
//! `AMF_SEED` environment variable (seed only), built-in default.

use std::path::PathBuf;

use amf_core::calibration::FeasibilityBounds;
use amf_core::dataset::{ColumnMapping, QuartileMethod};
use amf_core::dbn::DbnSpec;
use amf_core::selection::KRounding;
use amf_core::ses_index::RankMethod;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub data: DataSection,
    pub policy: PolicySection,
    pub feasibility: Option<FeasibilityBounds>,
    pub robustness: RobustnessSection,
    pub dbn: DbnSpec,
    pub spine: SpineSection,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
    pub schema: ColumnMapping,
    pub remove_outliers: bool,
    pub quartile_method: QuartileMethod,
    pub rank_method: RankMethod,
    pub national_reference: Option<PathBuf>,
    /// Use the seeded synthetic cohort instead of a data file.
    pub synthetic: bool,
    pub synthetic_n: Option<usize>,
    pub synthetic_seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            schema: ColumnMapping::pisa(),
            remove_outliers: true,
            quartile_method: QuartileMethod::default(),
            rank_method: RankMethod::default(),
            national_reference: None,
            synthetic: false,
            synthetic_n: None,
            synthetic_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub alpha: f64,
    pub mu: f64,
    pub top_fraction: f64,
    pub alpha_grid: Vec<f64>,
    pub with_intercept: bool,
    pub allow_negative_correction: bool,
    pub emergency_file: Option<PathBuf>,
    pub emergency_beta: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            mu: 0.5,
            top_fraction: 0.10,
            alpha_grid: vec![5.0, 10.0, 15.0],
            with_intercept: true,
            allow_negative_correction: false,
            emergency_file: None,
            emergency_beta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessSection {
    pub replicates: usize,
    pub ses_sigmas: Vec<f64>,
    pub score_noise_sds: Vec<f64>,
    pub variance_scales: Vec<f64>,
    pub top_fractions: Vec<f64>,
    pub threshold_points: Vec<f64>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            replicates: amf_core::perturbation::DEFAULT_REPLICATES,
            ses_sigmas: vec![0.05, 0.10],
            score_noise_sds: vec![5.0],
            variance_scales: vec![0.8, 1.2],
            top_fractions: vec![0.05, 0.10, 0.15],
            threshold_points: vec![-5.0, 5.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpineSection {
    pub alpha_bounds: (f64, f64),
    pub cycle_id: String,
    pub k_rounding: KRounding,
    pub pii_denylist: Option<Vec<String>>,
    /// CSV with columns `id,pre_optin` registered before the run.
    pub optin_file: Option<PathBuf>,
}

impl Default for SpineSection {
    fn default() -> Self {
        Self {
            alpha_bounds: (0.0, 15.0),
            cycle_id: "cycle-1".into(),
            k_rounding: KRounding::default(),
            pii_denylist: None,
            optin_file: None,
        }
    }
}

pub fn seed_from(flag: Option<u64>, file: Option<u64>, env: Option<&str>) -> Result<u64, String> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| format!("AMF_SEED `{v}` is not an unsigned integer")),
        None => Ok(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        assert_eq!(seed_from(Some(1), Some(2), Some("3")), Ok(1));
        assert_eq!(seed_from(None, Some(2), Some("3")), Ok(2));
        assert_eq!(seed_from(None, None, Some("3")), Ok(3));
        assert_eq!(seed_from(None, None, None), Ok(0));
        assert!(seed_from(None, None, Some("x")).is_err());
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c: FileConfig = serde_json::from_str(r#"{"policy": {"alpha": 5}}"#).unwrap();
        assert_eq!(c.policy.alpha, 5.0);
        assert_eq!(c.policy.mu, 0.5);
        assert_eq!(c.data.schema.merit, "PV1MATH");
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"polcy": {}}"#).is_err());
    }
}
