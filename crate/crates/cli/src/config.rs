use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rcgps_core::diagnostics::SdDenominator;
use rcgps_core::{
    BootstrapConfig, CutoffSpec, EstimatorOptions, ExposureSource, GpsOptions, Method, OutcomeSpec, Scale,
    ScenarioConfig, StudyConfig, TrimStrategy,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Parse a JSON config, reporting schema violations with the offending path.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let at = e.path().to_string();
        anyhow::anyhow!("config {}: at '{}': {}", path.display(), at, e.into_inner())
    })
}

/// Column names and what they mean. Columns absent from a given table are
/// simply not assigned there; the commands check what each stage needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roles {
    pub outcome: String,
    pub confounders: Vec<String>,
    #[serde(default)]
    pub true_exposure: Option<String>,
    #[serde(default)]
    pub error_prone_exposure: Option<String>,
    #[serde(default)]
    pub calibration_covariates: Vec<String>,
    /// Region identifier in the main study when exposure comes from a grid.
    #[serde(default)]
    pub region_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Grid-level table carrying the exposure columns named in `roles`.
    pub path: PathBuf,
    pub grid_id: String,
    /// Region/grid/area-weight link table.
    pub map: PathBuf,
    #[serde(default = "default_region")]
    pub map_region: String,
    #[serde(default = "default_grid")]
    pub map_grid: String,
    #[serde(default = "default_weight")]
    pub map_weight: String,
}

fn default_region() -> String {
    "region".into()
}
fn default_grid() -> String {
    "grid".into()
}
fn default_weight() -> String {
    "weight".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BalanceConfig {
    pub sd_denominator: SdDenominator,
    pub histogram_bins: usize,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            sd_denominator: SdDenominator::Pooled,
            histogram_bins: 20,
        }
    }
}

/// Shared by `estimate` and `diagnose`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub main: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    pub roles: Roles,
    pub cutoffs: CutoffSpec,
    #[serde(default = "default_exposure")]
    pub exposure: ExposureSource,
    pub method: Method,
    #[serde(default)]
    pub estimator: EstimatorOptions,
    #[serde(default)]
    pub gps: GpsOptions,
    #[serde(default)]
    pub trim: TrimStrategy,
    #[serde(default = "default_scales")]
    pub scales: Vec<Scale>,
    #[serde(default)]
    pub outcome_model: Option<OutcomeSpec>,
    #[serde(default)]
    pub bootstrap: Option<BootstrapConfig>,
    #[serde(default)]
    pub balance: BalanceConfig,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_exposure() -> ExposureSource {
    ExposureSource::RcWithCovariates
}
fn default_scales() -> Vec<Scale> {
    vec![Scale::Difference]
}
fn default_output() -> PathBuf {
    "out".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityConfig {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
}

fn default_method() -> Method {
    Method::Subclassification
}
fn default_deltas() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.5]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub study: StudyConfig,
    /// Rows used for the large-sample oracle ATE.
    #[serde(default = "default_oracle_n")]
    pub oracle_n: usize,
    #[serde(default)]
    pub sensitivity: Option<SensitivityConfig>,
    /// Also write every replicate's estimates.
    #[serde(default)]
    pub archive_replicates: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_oracle_n() -> usize {
    1_000_000
}

/// Relative paths in a config are taken relative to the config file.
pub fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
