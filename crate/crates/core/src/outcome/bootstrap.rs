//! Whole-pipeline bootstrap: every replicate refits calibration, GPS and the
//! estimator on resampled data.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AteTable;
use crate::calibration::RcModel;
use crate::error::{Error, Result};
use crate::estimators::Method;
use crate::pipeline::{run_pipeline_with_rc, ExposureSource, PipelineConfig, PipelineInputs};
use crate::rng::stream_rng;
use crate::stats::sd;

const Z_975: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapMode {
    Standard,
    /// Draw m < N main-study rows without replacement and rescale the
    /// variance by m/N.
    MOutOfN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub mode: BootstrapMode,
    /// Rows per m-out-of-n replicate; defaults to `ceil(N^(2/3))`.
    pub m: Option<usize>,
    pub seed: u64,
    /// Keep the calibration model fitted on the full validation study
    /// instead of resampling it.
    pub freeze_calibration: bool,
    pub max_failure_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            mode: BootstrapMode::Standard,
            m: None,
            seed: 0,
            freeze_calibration: false,
            max_failure_fraction: 0.1,
        }
    }
}

impl BootstrapConfig {
    /// The default mode for a method: m-out-of-n for matching.
    pub fn for_method(method: Method, replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            mode: if method == Method::Matching {
                BootstrapMode::MOutOfN
            } else {
                BootstrapMode::Standard
            },
            seed,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    /// The point estimates with `se` and 95% normal intervals filled in.
    pub table: AteTable,
    /// Per replicate, the contrast estimates in table-row order (`None` if it failed).
    pub replicates: Vec<Option<Vec<f64>>>,
    pub failures: Vec<(usize, String)>,
    /// Main-study rows drawn per replicate.
    pub rows_per_replicate: usize,
}

pub fn default_m(n: usize) -> usize {
    ((n as f64).powf(2.0 / 3.0).ceil() as usize).min(n)
}

pub fn bootstrap_ate(
    cfg: &PipelineConfig,
    inputs: PipelineInputs<'_>,
    point: &AteTable,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if boot.replicates < 2 {
        return Err(Error::InvalidArgument("the bootstrap needs at least 2 replicates".into()));
    }
    if cfg.method == Method::Matching && boot.mode != BootstrapMode::MOutOfN {
        return Err(Error::InvalidArgument(
            "the standard bootstrap is invalid for matching; use m_out_of_n".into(),
        ));
    }
    let n = inputs.main.n_rows();
    let m = match boot.mode {
        BootstrapMode::Standard => n,
        BootstrapMode::MOutOfN => boot.m.unwrap_or_else(|| default_m(n)),
    };
    if m < 2 || m > n {
        return Err(Error::InvalidArgument(format!("bootstrap draws {m} of {n} rows")));
    }
    let calibrated = matches!(
        cfg.exposure,
        ExposureSource::RcWithCovariates | ExposureSource::RcNoCovariates
    );
    let frozen: Option<RcModel> = if boot.freeze_calibration && calibrated {
        Some(
            run_pipeline_with_rc(cfg, inputs, None)?
                .rc
                .expect("calibrated pipelines return their model"),
        )
    } else {
        None
    };

    let outcomes: Vec<Result<Vec<f64>>> = (0..boot.replicates)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(boot.seed, b as u64);
            let rows: Vec<usize> = match boot.mode {
                BootstrapMode::Standard => (0..n).map(|_| rng.random_range(0..n)).collect(),
                BootstrapMode::MOutOfN => sample(&mut rng, n, m).into_vec(),
            };
            let main = inputs.main.select_rows(&rows);
            let validation = match (inputs.validation, &frozen) {
                (Some(v), None) => {
                    let nv = v.n_rows();
                    let vrows: Vec<usize> = (0..nv).map(|_| rng.random_range(0..nv)).collect();
                    Some(v.select_rows(&vrows))
                }
                _ => None,
            };
            let replicate_inputs = PipelineInputs {
                main: &main,
                validation: validation.as_ref().or(inputs.validation),
                grid: inputs.grid,
            };
            let out = run_pipeline_with_rc(cfg, replicate_inputs, frozen.as_ref())?;
            if out.ate.rows.len() != point.rows.len() {
                return Err(Error::InvalidData("replicate produced a different contrast set".into()));
            }
            Ok(out.ate.estimates())
        })
        .collect();

    let mut replicates = Vec::with_capacity(boot.replicates);
    let mut failures = Vec::new();
    for (b, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(v) => replicates.push(Some(v)),
            Err(e) => {
                failures.push((b, e.to_string()));
                replicates.push(None);
            }
        }
    }
    let limit = (boot.max_failure_fraction * boot.replicates as f64).floor() as usize;
    let ok = boot.replicates - failures.len();
    if failures.len() > limit || ok < 2 {
        return Err(Error::ReplicateFailures {
            failed: failures.len(),
            total: boot.replicates,
            limit,
            first: failures.first().map(|f| f.1.clone()).unwrap_or_default(),
        });
    }

    let scale = (m as f64 / n as f64).sqrt();
    let mut table = point.clone();
    for (i, row) in table.rows.iter_mut().enumerate() {
        let draws: Vec<f64> = replicates.iter().flatten().map(|v| v[i]).collect();
        let se = sd(&draws) * scale;
        row.se = Some(se);
        row.ci_lower = Some(row.estimate - Z_975 * se);
        row.ci_upper = Some(row.estimate + Z_975 * se);
    }
    Ok(BootstrapResult {
        table,
        replicates,
        failures,
        rows_per_replicate: m,
    })
}
