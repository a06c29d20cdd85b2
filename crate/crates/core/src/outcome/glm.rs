//! Outcome GLMs on the design each GPS method produces: identity link by
//! weighted least squares, log link by IRLS with a person-time offset.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AteRow, AteTable, Scale};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorOutput, Method, MethodDesign};
use crate::linalg::least_squares;

const MAX_ITER: usize = 100;
const DEVIANCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
}

/// Which outcome model to fit; column names refer to the main dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub link: Link,
    /// Adjust for the confounders as well (off by default).
    #[serde(default)]
    pub include_confounders: bool,
    /// Person-time column; its log enters as an offset (log link only).
    #[serde(default)]
    pub offset: Option<String>,
    /// Stratum column, entered as fixed effects.
    #[serde(default)]
    pub stratum: Option<String>,
}

/// Rows of the (possibly replicated) sample an outcome model is fitted to.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmData {
    pub y: Vec<f64>,
    pub xc: Vec<usize>,
    pub n_categories: usize,
    pub weights: Vec<f64>,
    pub confounders: Option<(Vec<String>, DMatrix<f64>)>,
    pub person_time: Option<Vec<f64>>,
    pub strata: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub link: Link,
    pub method: Method,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub n_categories: usize,
    pub iterations: usize,
    pub deviance: f64,
    pub n_obs: usize,
}

impl OutcomeModel {
    /// Coefficient of the indicator for category `x` (0 for the reference category 1).
    pub fn exposure_effect(&self, x: usize) -> f64 {
        if x == 1 {
            0.0
        } else {
            self.coefficients[x - 1]
        }
    }
}

/// Build the method-specific sample: IPTW weights on the original rows,
/// subclassification unit weights, or the replicated matched sample.
pub fn outcome_data(
    output: &EstimatorOutput,
    y: &[f64],
    xc: &[usize],
    n_categories: usize,
    confounders: Option<(&[String], &DMatrix<f64>)>,
    person_time: Option<&[f64]>,
    strata: Option<&[f64]>,
) -> GlmData {
    match &output.design {
        MethodDesign::Weights(w) => GlmData {
            y: y.to_vec(),
            xc: xc.to_vec(),
            n_categories,
            weights: w.clone(),
            confounders: confounders.map(|(n, c)| (n.to_vec(), c.clone())),
            person_time: person_time.map(<[f64]>::to_vec),
            strata: strata.map(<[f64]>::to_vec),
        },
        MethodDesign::Subclasses(d) => GlmData {
            y: y.to_vec(),
            xc: xc.to_vec(),
            n_categories,
            weights: d.unit_weights.clone(),
            confounders: confounders.map(|(n, c)| (n.to_vec(), c.clone())),
            person_time: person_time.map(<[f64]>::to_vec),
            strata: strata.map(<[f64]>::to_vec),
        },
        MethodDesign::Matched(a) => {
            let rows: Vec<(usize, usize)> = a
                .donors
                .iter()
                .enumerate()
                .flat_map(|(xi, d)| d.iter().map(move |&m| (xi + 1, m)))
                .collect();
            let pick = |v: &[f64]| rows.iter().map(|&(_, m)| v[m]).collect::<Vec<_>>();
            GlmData {
                y: pick(y),
                xc: rows.iter().map(|&(x, _)| x).collect(),
                n_categories,
                weights: vec![1.0; rows.len()],
                confounders: confounders.map(|(n, c)| {
                    let sel: Vec<usize> = rows.iter().map(|&(_, m)| m).collect();
                    (n.to_vec(), c.select_rows(sel.iter()))
                }),
                person_time: person_time.map(pick),
                strata: strata.map(pick),
            }
        }
    }
}

fn design(data: &GlmData) -> (DMatrix<f64>, Vec<String>) {
    let n = data.y.len();
    // First stratum level is the reference.
    let levels: Vec<f64> = data.strata.as_ref().map_or_else(Vec::new, |s| {
        let mut v = s.clone();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v.into_iter().skip(1).collect()
    });
    let c_cols = data.confounders.as_ref().map_or(0, |(_, c)| c.ncols());
    let p = data.n_categories + levels.len() + c_cols;
    let mut names = vec!["intercept".to_string()];
    names.extend((2..=data.n_categories).map(|x| format!("exposure_{x}")));
    names.extend(levels.iter().map(|l| format!("stratum_{l}")));
    if let Some((cn, _)) = &data.confounders {
        names.extend(cn.iter().cloned());
    }
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        if data.xc[i] > 1 {
            x[(i, data.xc[i] - 1)] = 1.0;
        }
        if let Some(s) = &data.strata {
            if let Some(k) = levels.iter().position(|l| *l == s[i]) {
                x[(i, data.n_categories + k)] = 1.0;
            }
        }
        if let Some((_, c)) = &data.confounders {
            for j in 0..c_cols {
                x[(i, data.n_categories + levels.len() + j)] = c[(i, j)];
            }
        }
    }
    (x, names)
}

fn poisson_deviance(y: &[f64], mu: &[f64], w: &[f64]) -> f64 {
    2.0 * y
        .iter()
        .zip(mu)
        .zip(w)
        .map(|((&y, &m), &w)| {
            let t = if y > 0.0 { y * (y / m).ln() } else { 0.0 };
            w * (t - (y - m))
        })
        .sum::<f64>()
}

pub fn fit_glm(data: &GlmData, link: Link, method: Method) -> Result<OutcomeModel> {
    let n = data.y.len();
    if data.xc.len() != n || data.weights.len() != n {
        return Err(Error::Schema("outcome model inputs have different lengths".into()));
    }
    if let Some(pt) = &data.person_time {
        if let Some(i) = pt.iter().position(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidData(format!(
                "person-time must be positive; row {} has {}",
                i + 1,
                pt[i]
            )));
        }
    }
    let (x, names) = design(data);
    match link {
        Link::Identity => {
            if data.person_time.is_some() {
                return Err(Error::InvalidArgument("a person-time offset needs the log link".into()));
            }
            let fit = least_squares(x, &data.y, Some(&data.weights), &names)?;
            Ok(OutcomeModel {
                link,
                method,
                standard_errors: fit.standard_errors(),
                coefficients: fit.coefficients,
                names,
                n_categories: data.n_categories,
                iterations: 1,
                deviance: fit.rss,
                n_obs: n,
            })
        }
        Link::Log => {
            if let Some(i) = data.y.iter().position(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidData(format!(
                    "log-link outcome must be nonnegative; row {} has {}",
                    i + 1,
                    data.y[i]
                )));
            }
            let offset: Vec<f64> = data
                .person_time
                .as_ref()
                .map_or_else(|| vec![0.0; n], |pt| pt.iter().map(|t| t.ln()).collect());
            let mut mu: Vec<f64> = data.y.iter().zip(&offset).map(|(y, o)| (y + 0.1).max(o.exp() * 1e-8)).collect();
            let mut eta: Vec<f64> = mu.iter().map(|m| m.ln()).collect();
            let mut dev_old = f64::INFINITY;
            for it in 1..=MAX_ITER {
                let z: Vec<f64> = (0..n)
                    .map(|i| eta[i] - offset[i] + (data.y[i] - mu[i]) / mu[i])
                    .collect();
                let w: Vec<f64> = (0..n).map(|i| data.weights[i] * mu[i]).collect();
                let fit = least_squares(x.clone(), &z, Some(&w), &names)?;
                let lin = &x * DVector::from_column_slice(&fit.coefficients);
                eta = (0..n).map(|i| lin[i] + offset[i]).collect();
                mu = eta.iter().map(|e| e.exp()).collect();
                if mu.iter().any(|m| !m.is_finite()) {
                    return Err(Error::NotConverged {
                        what: "log-link outcome model".into(),
                        iterations: it,
                    });
                }
                let dev = poisson_deviance(&data.y, &mu, &data.weights);
                if (dev - dev_old).abs() / (dev.abs() + 0.1) < DEVIANCE_TOL {
                    let se = (0..fit.coefficients.len())
                        .map(|j| fit.unscaled_covariance[(j, j)].max(0.0).sqrt())
                        .collect();
                    return Ok(OutcomeModel {
                        link,
                        method,
                        names,
                        coefficients: fit.coefficients,
                        standard_errors: se,
                        n_categories: data.n_categories,
                        iterations: it,
                        deviance: dev,
                        n_obs: n,
                    });
                }
                dev_old = dev;
            }
            Err(Error::NotConverged {
                what: "log-link outcome model".into(),
                iterations: MAX_ITER,
            })
        }
    }
}

/// Fit the outcome model on the design of `output`.
#[allow(clippy::too_many_arguments)]
pub fn fit_outcome_glm(
    output: &EstimatorOutput,
    spec: &OutcomeSpec,
    y: &[f64],
    xc: &[usize],
    n_categories: usize,
    confounders: Option<(&[String], &DMatrix<f64>)>,
    person_time: Option<&[f64]>,
    strata: Option<&[f64]>,
) -> Result<OutcomeModel> {
    let confounders = if spec.include_confounders { confounders } else { None };
    let data = outcome_data(output, y, xc, n_categories, confounders, person_time, strata);
    fit_glm(&data, spec.link, output.estimates.method)
}

/// Contrasts implied by the exposure coefficients: differences for the
/// identity link, rate ratios for the log link.
pub fn glm_contrasts(model: &OutcomeModel) -> AteTable {
    let n = model.n_categories;
    let mut rows = Vec::new();
    for xp in 1..=n {
        for x in 1..=n {
            if xp == x {
                continue;
            }
            let d = model.exposure_effect(xp) - model.exposure_effect(x);
            let (scale, estimate) = match model.link {
                Link::Identity => (Scale::Difference, d),
                Link::Log => (Scale::Ratio, d.exp()),
            };
            rows.push(AteRow {
                x_prime: xp,
                x,
                scale,
                estimate,
                se: None,
                ci_lower: None,
                ci_upper: None,
                method: model.method,
            });
        }
    }
    AteTable { rows }
}
