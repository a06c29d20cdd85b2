//! Linear regression calibration: fit `E(X | W, D)` on the validation study
//! and predict the corrected exposure in the main study.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::least_squares;
use crate::tabular::{Role, TabularDataset};

/// Fitted calibration model `X = gamma0 + gamma1 W + gamma2' D` with
/// homoscedastic residual variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RcModel {
    pub gamma0: f64,
    pub gamma1: f64,
    pub gamma2: Vec<f64>,
    pub residual_variance: f64,
    pub r_squared: f64,
    /// Standard errors in coefficient order `(gamma0, gamma1, gamma2...)`.
    pub standard_errors: Vec<f64>,
    pub exposure_name: String,
    pub covariate_names: Vec<String>,
    pub n_obs: usize,
}

impl RcModel {
    pub fn se_gamma1(&self) -> f64 {
        self.standard_errors[1]
    }

    /// Prediction for one row of `(w, d)`.
    pub fn predict_one(&self, w: f64, d: &[f64]) -> f64 {
        self.gamma0
            + self.gamma1 * w
            + self.gamma2.iter().zip(d).map(|(g, v)| g * v).sum::<f64>()
    }
}

/// Fit using the dataset's roles: true exposure X, error-prone exposure W
/// and every calibration covariate D.
pub fn fit_rc(validation: &TabularDataset) -> Result<RcModel> {
    let roles = validation.roles();
    let x = roles
        .single(Role::TrueExposure)?
        .ok_or_else(|| Error::Schema("validation study has no true exposure column".into()))?;
    let w = roles
        .single(Role::ErrorProneExposure)?
        .ok_or_else(|| Error::Schema("validation study has no error-prone exposure column".into()))?;
    let d = roles.columns(Role::CalibrationCovariate);
    fit_rc_columns(validation, x, w, &d)
}

/// Fit with explicit column names; `covariates` may be empty.
pub fn fit_rc_columns(
    validation: &TabularDataset,
    true_exposure: &str,
    exposure: &str,
    covariates: &[&str],
) -> Result<RcModel> {
    let x = validation.column(true_exposure)?;
    let w = validation.column(exposure)?;
    let d: Vec<&[f64]> = covariates
        .iter()
        .map(|c| validation.column(c))
        .collect::<Result<_>>()?;
    let n = validation.n_rows();
    let p = 2 + d.len();
    if n <= p {
        return Err(Error::InvalidData(format!(
            "validation study has {n} rows for {p} calibration coefficients"
        )));
    }
    let design = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        1 => w[i],
        _ => d[j - 2][i],
    });
    let mut names = vec!["(intercept)".to_string(), exposure.to_string()];
    names.extend(covariates.iter().map(|c| c.to_string()));

    let fit = least_squares(design, x, None, &names)?;
    Ok(RcModel {
        gamma0: fit.coefficients[0],
        gamma1: fit.coefficients[1],
        gamma2: fit.coefficients[2..].to_vec(),
        residual_variance: fit.residual_variance,
        r_squared: fit.r_squared,
        standard_errors: fit.standard_errors(),
        exposure_name: exposure.to_string(),
        covariate_names: covariates.iter().map(|c| c.to_string()).collect(),
        n_obs: n,
    })
}

/// Corrected exposure for every row of the main study. The error-prone
/// exposure is taken from the main study's W role when assigned, otherwise
/// from the column name used at fit time.
pub fn predict_xhat(model: &RcModel, main: &TabularDataset) -> Result<Vec<f64>> {
    let w = match main.roles().single(Role::ErrorProneExposure)? {
        Some(name) => main.column(name)?,
        None => main.column(&model.exposure_name)?,
    };
    let d: Vec<&[f64]> = model
        .covariate_names
        .iter()
        .map(|c| {
            main.column(c).map_err(|_| {
                Error::Schema(format!("main study lacks calibration covariate '{c}'"))
            })
        })
        .collect::<Result<_>>()?;
    let mut row = vec![0.0; d.len()];
    let out: Vec<f64> = (0..main.n_rows())
        .map(|i| {
            for (slot, col) in row.iter_mut().zip(&d) {
                *slot = col[i];
            }
            model.predict_one(w[i], &row)
        })
        .collect();
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidData(format!(
            "non-finite calibrated exposure at row {}",
            i + 1
        )));
    }
    Ok(out)
}

/// Copy of `model` with `gamma1` redrawn from `Normal(gamma1, (se + delta_sd)^2)`.
/// Used to probe sensitivity to the transportability assumption.
pub fn perturb_gamma1(model: &RcModel, delta_sd: f64, seed: u64) -> Result<RcModel> {
    if !(delta_sd.is_finite() && delta_sd >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "delta_sd must be nonnegative, got {delta_sd}"
        )));
    }
    let sd = model.se_gamma1() + delta_sd;
    let dist = Normal::new(model.gamma1, sd)
        .map_err(|e| Error::InvalidArgument(format!("perturbation sd {sd}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    out.gamma1 = dist.sample(&mut rng);
    Ok(out)
}
