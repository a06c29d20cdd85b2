//! The two-stage analysis end to end: measurement-error correction, then
//! GPS estimation, trimming, a potential-outcome estimator and contrasts.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_rc, fit_rc_columns, predict_xhat, RcModel};
use crate::error::{Error, Result};
use crate::estimators::{estimate, EstimatorOptions, EstimatorOutput, Method};
use crate::gps::{fit_multinomial, predict_gps, trim_indices, GpsMatrix, GpsModel, GpsOptions, TrimStrategy};
use crate::outcome::{ate_contrasts, fit_outcome_glm, glm_contrasts, AteTable, OutcomeModel, OutcomeSpec, Scale};
use crate::tabular::{aggregate_regions, categorize, CutoffSpec, GridRegionMap, Role, TabularDataset};

/// Which continuous exposure is categorized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExposureSource {
    /// The true exposure X (available only in simulations).
    ErrorFree,
    /// The error-prone exposure W, uncorrected.
    ErrorProne,
    /// Regression-calibrated X-hat from W alone.
    RcNoCovariates,
    /// Regression-calibrated X-hat from W and the calibration covariates D.
    RcWithCovariates,
}

fn default_scales() -> Vec<Scale> {
    vec![Scale::Difference]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
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
    /// When set, contrasts come from this outcome model instead of the raw means.
    #[serde(default)]
    pub outcome_model: Option<OutcomeSpec>,
}

fn default_exposure() -> ExposureSource {
    ExposureSource::RcWithCovariates
}

impl PipelineConfig {
    pub fn new(cutoffs: CutoffSpec, exposure: ExposureSource, method: Method) -> Self {
        Self {
            cutoffs,
            exposure,
            method,
            estimator: EstimatorOptions::default(),
            gps: GpsOptions::default(),
            trim: TrimStrategy::None,
            scales: default_scales(),
            outcome_model: None,
        }
    }
}

/// Exposure measured on a grid and averaged onto the main study's regions.
/// The grid table carries W (and X or D as needed) plus a `region_id`-role
/// column holding grid identifiers.
#[derive(Debug, Clone, Copy)]
pub struct GridInput<'a> {
    pub grid: &'a TabularDataset,
    pub map: &'a GridRegionMap,
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub main: &'a TabularDataset,
    pub validation: Option<&'a TabularDataset>,
    pub grid: Option<GridInput<'a>>,
}

impl<'a> PipelineInputs<'a> {
    pub fn new(main: &'a TabularDataset, validation: Option<&'a TabularDataset>) -> Self {
        Self {
            main,
            validation,
            grid: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub rc: Option<RcModel>,
    /// Continuous exposure for every main-study unit.
    pub exposure: Vec<f64>,
    pub gps_model: GpsModel,
    /// Indices (into the main study) of units kept after trimming.
    pub kept: Vec<usize>,
    pub kept_fraction: f64,
    /// Everything below is restricted to the kept units.
    pub y: Vec<f64>,
    pub xc: Vec<usize>,
    pub gps: GpsMatrix,
    pub confounder_names: Vec<String>,
    pub confounders: DMatrix<f64>,
    pub estimator: EstimatorOutput,
    pub outcome: Option<OutcomeModel>,
    pub ate: AteTable,
    /// Categories before trimming, for the overlap summary.
    pub xc_all: Vec<usize>,
    pub gps_all: GpsMatrix,
}

fn confounder_matrix(main: &TabularDataset) -> Result<(Vec<String>, DMatrix<f64>)> {
    let names: Vec<String> = main
        .roles()
        .columns(Role::Confounder)
        .into_iter()
        .map(str::to_string)
        .collect();
    let cols = main.role_columns(Role::Confounder)?;
    let m = DMatrix::from_fn(main.n_rows(), cols.len(), |i, j| cols[j][i]);
    Ok((names, m))
}

fn calibration_model(
    source: ExposureSource,
    validation: Option<&TabularDataset>,
) -> Result<RcModel> {
    let v = validation.ok_or_else(|| {
        Error::Schema("regression calibration needs a validation study".into())
    })?;
    match source {
        ExposureSource::RcWithCovariates => fit_rc(v),
        _ => {
            let roles = v.roles();
            let x = roles
                .single(Role::TrueExposure)?
                .ok_or_else(|| Error::Schema("validation study has no true exposure column".into()))?;
            let w = roles
                .single(Role::ErrorProneExposure)?
                .ok_or_else(|| Error::Schema("validation study has no error-prone exposure column".into()))?;
            fit_rc_columns(v, x, w, &[])
        }
    }
}

fn named_role<'d>(data: &'d TabularDataset, role: Role, what: &str) -> Result<&'d [f64]> {
    data.role_column(role)
        .map_err(|_| Error::Schema(format!("{what} column is not assigned")))
}

/// Exposure per unit of `data` (main study or grid table) under `source`.
fn unit_exposure(
    source: ExposureSource,
    data: &TabularDataset,
    rc: Option<&RcModel>,
) -> Result<Vec<f64>> {
    match source {
        ExposureSource::ErrorFree => Ok(named_role(data, Role::TrueExposure, "true exposure")?.to_vec()),
        ExposureSource::ErrorProne => {
            Ok(named_role(data, Role::ErrorProneExposure, "error-prone exposure")?.to_vec())
        }
        ExposureSource::RcWithCovariates | ExposureSource::RcNoCovariates => {
            predict_xhat(rc.expect("model fitted for calibrated sources"), data)
        }
    }
}

pub fn run_pipeline(cfg: &PipelineConfig, inputs: PipelineInputs<'_>) -> Result<PipelineOutput> {
    run_pipeline_with_rc(cfg, inputs, None)
}

/// As [`run_pipeline`], optionally reusing a fitted calibration model
/// instead of refitting on the validation study.
pub fn run_pipeline_with_rc(
    cfg: &PipelineConfig,
    inputs: PipelineInputs<'_>,
    rc: Option<&RcModel>,
) -> Result<PipelineOutput> {
    let main = inputs.main;
    let y_all = named_role(main, Role::Outcome, "outcome")?;
    let calibrated = matches!(
        cfg.exposure,
        ExposureSource::RcWithCovariates | ExposureSource::RcNoCovariates
    );
    let rc = match (calibrated, rc) {
        (false, _) => None,
        (true, Some(m)) => Some(m.clone()),
        (true, None) => Some(calibration_model(cfg.exposure, inputs.validation)?),
    };

    let exposure = match inputs.grid {
        None => unit_exposure(cfg.exposure, main, rc.as_ref())?,
        Some(g) => {
            let values = unit_exposure(cfg.exposure, g.grid, rc.as_ref())?;
            let ids = named_role(g.grid, Role::RegionId, "grid id")?;
            let grid_values: BTreeMap<i64, f64> =
                ids.iter().map(|&id| id as i64).zip(values).collect();
            let regional = aggregate_regions(&grid_values, g.map)?;
            let regions = named_role(main, Role::RegionId, "region id")?;
            regions
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    regional.get(&(r as i64)).copied().ok_or_else(|| {
                        Error::InvalidData(format!("main-study row {} has region {r} with no grid cells", i + 1))
                    })
                })
                .collect::<Result<_>>()?
        }
    };

    let n_categories = cfg.cutoffs.n_categories();
    let xc_all = categorize(&exposure, &cfg.cutoffs)?;
    let (confounder_names, c_all) = confounder_matrix(main)?;
    let gps_model = fit_multinomial(&xc_all, &c_all, n_categories, &cfg.gps)?;
    let gps_all = predict_gps(&gps_model, &c_all)?;

    let kept = trim_indices(&gps_all, &xc_all, cfg.trim)?;
    let all_kept = kept.len() == main.n_rows();
    let (y, xc, gps, confounders) = if all_kept {
        (y_all.to_vec(), xc_all.clone(), gps_all.clone(), c_all)
    } else {
        (
            kept.iter().map(|&j| y_all[j]).collect(),
            kept.iter().map(|&j| xc_all[j]).collect(),
            gps_all.select_rows(&kept),
            c_all.select_rows(kept.iter()),
        )
    };

    let estimator = estimate(cfg.method, &y, &xc, &gps, &cfg.estimator)?;
    let (outcome, ate) = match &cfg.outcome_model {
        None => (None, ate_contrasts(&estimator.estimates, &cfg.scales)?),
        Some(spec) => {
            let pick = |name: &Option<String>| -> Result<Option<Vec<f64>>> {
                name.as_ref()
                    .map(|c| main.column(c).map(|v| kept.iter().map(|&j| v[j]).collect()))
                    .transpose()
            };
            let person_time = pick(&spec.offset)?;
            let strata = pick(&spec.stratum)?;
            let model = fit_outcome_glm(
                &estimator,
                spec,
                &y,
                &xc,
                n_categories,
                Some((&confounder_names, &confounders)),
                person_time.as_deref(),
                strata.as_deref(),
            )?;
            let table = glm_contrasts(&model);
            (Some(model), table)
        }
    };

    Ok(PipelineOutput {
        rc,
        exposure,
        gps_model,
        kept_fraction: kept.len() as f64 / main.n_rows() as f64,
        kept,
        y,
        xc,
        gps,
        confounder_names,
        confounders,
        estimator,
        outcome,
        ate,
        xc_all,
        gps_all,
    })
}
