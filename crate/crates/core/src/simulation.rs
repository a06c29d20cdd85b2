//! Monte Carlo harness: scenario generation, the large-sample oracle ATE,
//! replicate studies across exposure arms and methods, and the
//! calibration-perturbation sensitivity ladder.

use nalgebra::{DMatrix, Matrix3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{fit_rc, perturb_gamma1};
use crate::error::{Error, Result};
use crate::estimators::{EstimatorOptions, Method};
use crate::gps::TrimStrategy;
use crate::linalg::least_squares;
use crate::outcome::{bootstrap_ate, BootstrapConfig, Scale};
use crate::pipeline::{run_pipeline, run_pipeline_with_rc, ExposureSource, PipelineConfig, PipelineInputs};
use crate::rng::derive_seed;
use crate::stats::{mean, sd};
use crate::tabular::{categorize, CutoffSpec, Role, RoleMap, TabularDataset};

/// Covariance of (C1, C2, C3).
const SIGMA_C: [[f64; 3]; 3] = [[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Intercept then slopes on C1..C6 for W given C.
    pub tau: Vec<f64>,
    pub gamma1: f64,
    pub gamma2: Vec<f64>,
    pub rc_noise_sd: f64,
    /// Coefficient on W^2 in X (0 for the linear calibration model).
    pub gamma3: f64,
    pub beta1: f64,
    pub beta2: Vec<f64>,
    pub y_noise_sd: f64,
    pub w_noise_sd: f64,
    pub n_main: usize,
    pub n_validation: usize,
    pub cutoffs: CutoffSpec,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    /// Strong-correlation scenario: noise scales chosen so corr(X, W) is about 0.85.
    fn default() -> Self {
        Self {
            tau: vec![0.8, 0.8, 1.6, 1.2, 2.4, 1.6, 2.4],
            gamma1: 0.8,
            gamma2: vec![2.0, 1.0, 3.0],
            rc_noise_sd: 1.0,
            gamma3: 0.0,
            beta1: 1.0,
            beta2: vec![3.0, 2.0, 1.0, 4.0, 2.0, 1.0],
            y_noise_sd: 1.0,
            w_noise_sd: 18.5,
            n_main: 2000,
            n_validation: 500,
            cutoffs: CutoffSpec::new(vec![-5.0, 15.0]).expect("valid default cutoffs"),
            replicates: 200,
            seed: 2024,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.tau.len() != 7 {
            return bad(format!("tau needs 7 entries, got {}", self.tau.len()));
        }
        if self.gamma2.len() != 3 {
            return bad(format!("gamma2 needs 3 entries, got {}", self.gamma2.len()));
        }
        if self.beta2.len() != 6 {
            return bad(format!("beta2 needs 6 entries, got {}", self.beta2.len()));
        }
        for (name, v) in [
            ("rc_noise_sd", self.rc_noise_sd),
            ("y_noise_sd", self.y_noise_sd),
            ("w_noise_sd", self.w_noise_sd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if self.n_main == 0 || self.n_validation == 0 || self.n_validation > self.n_main {
            return bad(format!(
                "need 0 < n_validation ({}) <= n_main ({})",
                self.n_validation, self.n_main
            ));
        }
        Ok(())
    }
}

/// Raw simulated columns in generation order.
struct Draws {
    y: Vec<f64>,
    x: Vec<f64>,
    w: Vec<f64>,
    c: [Vec<f64>; 6],
    d: [Vec<f64>; 3],
}

fn draw(cfg: &ScenarioConfig, n: usize, seed: u64) -> Draws {
    let l = Matrix3::from_fn(|i, j| SIGMA_C[i][j])
        .cholesky()
        .expect("covariance is positive definite")
        .l();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Draws {
        y: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        w: Vec::with_capacity(n),
        c: Default::default(),
        d: Default::default(),
    };
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };
    for _ in 0..n {
        let z = [normal(&mut rng), normal(&mut rng), normal(&mut rng)];
        let mut c = [0.0; 6];
        for i in 0..3 {
            c[i] = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
        }
        c[3] = rng.random_range(-2..=2) as f64;
        c[4] = rng.random_range(-3.0..3.0);
        c[5] = normal(&mut rng).powi(2);
        let d = [c[0], 2.0 * normal(&mut rng), rng.random_range(-5.0..5.0)];

        let w = cfg.tau[0]
            + (0..6).map(|k| cfg.tau[k + 1] * c[k]).sum::<f64>()
            + cfg.w_noise_sd * normal(&mut rng);
        let x = cfg.gamma1 * w
            + (0..3).map(|k| cfg.gamma2[k] * d[k]).sum::<f64>()
            + cfg.gamma3 * w * w
            + cfg.rc_noise_sd * normal(&mut rng);
        let y = cfg.beta1 * x
            + (0..6).map(|k| cfg.beta2[k] * c[k]).sum::<f64>()
            + cfg.y_noise_sd * normal(&mut rng);

        out.y.push(y);
        out.x.push(x);
        out.w.push(w);
        for k in 0..6 {
            out.c[k].push(c[k]);
        }
        for k in 0..3 {
            out.d[k].push(d[k]);
        }
    }
    out
}

pub const CONFOUNDERS: [&str; 6] = ["c1", "c2", "c3", "c4", "c5", "c6"];
pub const CALIBRATION_COVARIATES: [&str; 3] = ["d1", "d2", "d3"];

fn roles() -> RoleMap {
    let mut r = RoleMap::new()
        .with("y", Role::Outcome)
        .with("x", Role::TrueExposure)
        .with("w", Role::ErrorProneExposure);
    for c in CONFOUNDERS {
        r.assign(c, Role::Confounder);
    }
    for d in CALIBRATION_COVARIATES {
        r.assign(d, Role::CalibrationCovariate);
    }
    r
}

/// Main study of `n_main` rows; the validation study is its first
/// `n_validation` rows, where X counts as observed.
pub fn generate_scenario(cfg: &ScenarioConfig, seed: u64) -> Result<(TabularDataset, TabularDataset)> {
    cfg.validate()?;
    let Draws { y, x, w, c, d } = draw(cfg, cfg.n_main, seed);
    let mut names = vec!["y".to_string(), "x".to_string(), "w".to_string()];
    names.extend(CONFOUNDERS.iter().map(|s| s.to_string()));
    names.extend(CALIBRATION_COVARIATES.iter().map(|s| s.to_string()));
    let mut columns = vec![y, x, w];
    columns.extend(c);
    columns.extend(d);
    let main = TabularDataset::new(names, columns)?.with_roles(roles())?;
    let validation = main.head(cfg.n_validation);
    Ok((main, validation))
}

/// Contrasts between adjacent categories, `(x + 1, x)`.
pub fn adjacent_contrasts(n_categories: usize) -> Vec<(usize, usize)> {
    (1..n_categories).map(|x| (x + 1, x)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleAte {
    pub contrasts: Vec<(usize, usize)>,
    pub ate: Vec<f64>,
    pub se: Vec<f64>,
    pub n: usize,
}

/// Seed for the oracle dataset, kept apart from every replicate stream.
pub fn oracle_seed(seed: u64) -> u64 {
    derive_seed(seed, u64::MAX)
}

/// Regress Y on category indicators of the true X and on C in `n`
/// simulated rows; adjacent-category coefficient differences are the ATEs.
pub fn oracle_ate(cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<OracleAte> {
    cfg.validate()?;
    let draws = draw(cfg, n, seed);
    let xc = categorize(&draws.x, &cfg.cutoffs)?;
    let k = cfg.cutoffs.n_categories();
    let mut counts = vec![0usize; k];
    for &x in &xc {
        counts[x - 1] += 1;
    }
    if let Some(x) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidSpec(format!(
            "category {} is empty in {n} oracle draws",
            x + 1
        )));
    }
    let p = k + 6;
    let design = DMatrix::from_fn(n, p, |i, j| match j {
        0 => 1.0,
        j if j < k => (xc[i] == j + 1) as u8 as f64,
        j => draws.c[j - k][i],
    });
    let mut names = vec!["intercept".to_string()];
    names.extend((2..=k).map(|x| format!("exposure_{x}")));
    names.extend(CONFOUNDERS.iter().map(|s| s.to_string()));
    let fit = least_squares(design, &draws.y, None, &names)?;
    let coef = |x: usize| if x == 1 { 0.0 } else { fit.coefficients[x - 1] };
    let cov = |a: usize, b: usize| {
        if a == 1 || b == 1 {
            0.0
        } else {
            fit.covariance[(a - 1, b - 1)]
        }
    };
    let contrasts = adjacent_contrasts(k);
    let ate = contrasts.iter().map(|&(a, b)| coef(a) - coef(b)).collect();
    let se = contrasts
        .iter()
        .map(|&(a, b)| (cov(a, a) + cov(b, b) - 2.0 * cov(a, b)).max(0.0).sqrt())
        .collect();
    Ok(OracleAte { contrasts, ate, se, n })
}

/// Replicate-study design; the scenario supplies the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub arms: Vec<ExposureSource>,
    pub methods: Vec<Method>,
    pub estimator: EstimatorOptions,
    pub trim: TrimStrategy,
    /// Bootstrap replicates per outer replicate for interval coverage (0 = off).
    pub bootstrap_replicates: usize,
    pub max_failure_fraction: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            arms: vec![
                ExposureSource::ErrorFree,
                ExposureSource::ErrorProne,
                ExposureSource::RcNoCovariates,
                ExposureSource::RcWithCovariates,
            ],
            methods: vec![Method::Subclassification],
            estimator: EstimatorOptions::default(),
            trim: TrimStrategy::None,
            bootstrap_replicates: 0,
            max_failure_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub arm: ExposureSource,
    pub method: Method,
    /// Adjacent-contrast estimates (empty when the replicate failed).
    pub estimates: Vec<f64>,
    pub covered: Option<Vec<bool>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub arm: ExposureSource,
    pub method: Method,
    pub x_prime: usize,
    pub x: usize,
    pub oracle: f64,
    pub mean: f64,
    pub bias: f64,
    pub percent_bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean, `sd / sqrt(R)`.
    pub mc_se: f64,
    pub coverage: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<ReplicateRecord>,
}

impl ReplicateSummary {
    pub fn row(&self, arm: ExposureSource, method: Method, x_prime: usize, x: usize) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|r| r.arm == arm && r.method == method && r.x_prime == x_prime && r.x == x)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "arm,method,x_prime,x,oracle,mean,bias,percent_bias,sd,mc_se,coverage,n_ok,n_failed"
        )?;
        for r in &self.rows {
            let arm = serde_json::to_value(r.arm)?;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                arm.as_str().unwrap_or_default(),
                r.method,
                r.x_prime,
                r.x,
                r.oracle,
                r.mean,
                r.bias,
                r.percent_bias,
                r.sd,
                r.mc_se,
                r.coverage.map_or(String::new(), |c| c.to_string()),
                r.n_ok,
                r.n_failed
            )?;
        }
        Ok(())
    }
}

fn pipeline_config(cutoffs: &CutoffSpec, arm: ExposureSource, method: Method, study: &StudyConfig) -> PipelineConfig {
    let mut p = PipelineConfig::new(cutoffs.clone(), arm, method);
    p.estimator = study.estimator;
    p.trim = study.trim;
    p.scales = vec![Scale::Difference];
    p
}

fn adjacent_estimates(table: &crate::outcome::AteTable, contrasts: &[(usize, usize)]) -> Vec<f64> {
    contrasts
        .iter()
        .map(|&(a, b)| table.get(a, b, Scale::Difference).map_or(f64::NAN, |r| r.estimate))
        .collect()
}

/// One outer replicate: every arm and method on the same simulated data.
fn one_replicate(
    cfg: &ScenarioConfig,
    study: &StudyConfig,
    oracle: &OracleAte,
    r: usize,
) -> Vec<ReplicateRecord> {
    let seed = derive_seed(cfg.seed, r as u64);
    let data = generate_scenario(cfg, seed);
    let mut out = Vec::new();
    for (a, &arm) in study.arms.iter().enumerate() {
        for (m, &method) in study.methods.iter().enumerate() {
            let record = |estimates, covered, error| ReplicateRecord {
                replicate: r,
                arm,
                method,
                estimates,
                covered,
                error,
            };
            let (main, validation) = match &data {
                Ok(d) => d,
                Err(e) => {
                    out.push(record(Vec::new(), None, Some(e.to_string())));
                    continue;
                }
            };
            let pc = pipeline_config(&cfg.cutoffs, arm, method, study);
            let inputs = PipelineInputs::new(main, Some(validation));
            let result = run_pipeline(&pc, inputs).and_then(|point| {
                let est = adjacent_estimates(&point.ate, &oracle.contrasts);
                if study.bootstrap_replicates == 0 {
                    return Ok((est, None));
                }
                let boot_seed = derive_seed(seed, (1 + a * study.methods.len() + m) as u64);
                let bc = BootstrapConfig::for_method(method, study.bootstrap_replicates, boot_seed);
                let b = bootstrap_ate(&pc, inputs, &point.ate, &bc)?;
                let covered = oracle
                    .contrasts
                    .iter()
                    .zip(&oracle.ate)
                    .map(|(&(xp, x), &truth)| {
                        let row = b.table.get(xp, x, Scale::Difference).expect("contrast present");
                        row.ci_lower.unwrap() <= truth && truth <= row.ci_upper.unwrap()
                    })
                    .collect();
                Ok((est, Some(covered)))
            });
            out.push(match result {
                Ok((est, covered)) => record(est, covered, None),
                Err(e) => record(Vec::new(), None, Some(e.to_string())),
            });
        }
    }
    out
}

/// Run `cfg.replicates` outer replicates and summarize against `oracle`.
pub fn run_replicates(cfg: &ScenarioConfig, study: &StudyConfig, oracle: &OracleAte) -> Result<ReplicateSummary> {
    cfg.validate()?;
    if cfg.replicates == 0 {
        return Err(Error::InvalidArgument("need at least one replicate".into()));
    }
    let records: Vec<ReplicateRecord> = (0..cfg.replicates)
        .into_par_iter()
        .flat_map_iter(|r| one_replicate(cfg, study, oracle, r))
        .collect();

    let limit = (study.max_failure_fraction * cfg.replicates as f64).floor() as usize;
    let mut rows = Vec::new();
    for &arm in &study.arms {
        for &method in &study.methods {
            let mine: Vec<&ReplicateRecord> =
                records.iter().filter(|r| r.arm == arm && r.method == method).collect();
            let failed: Vec<&&ReplicateRecord> = mine.iter().filter(|r| r.error.is_some()).collect();
            if failed.len() > limit || failed.len() == mine.len() {
                return Err(Error::ReplicateFailures {
                    failed: failed.len(),
                    total: mine.len(),
                    limit,
                    first: failed.first().and_then(|r| r.error.clone()).unwrap_or_default(),
                });
            }
            let ok: Vec<&&ReplicateRecord> = mine.iter().filter(|r| r.error.is_none()).collect();
            for (i, (&(xp, x), &truth)) in oracle.contrasts.iter().zip(&oracle.ate).enumerate() {
                let est: Vec<f64> = ok.iter().map(|r| r.estimates[i]).collect();
                let m = mean(&est);
                let s = sd(&est);
                let coverage = (study.bootstrap_replicates > 0).then(|| {
                    ok.iter().filter(|r| r.covered.as_ref().is_some_and(|c| c[i])).count() as f64
                        / ok.len() as f64
                });
                rows.push(SummaryRow {
                    arm,
                    method,
                    x_prime: xp,
                    x,
                    oracle: truth,
                    mean: m,
                    bias: m - truth,
                    percent_bias: 100.0 * (m - truth) / truth,
                    sd: s,
                    mc_se: s / (est.len() as f64).sqrt(),
                    coverage,
                    n_ok: ok.len(),
                    n_failed: failed.len(),
                });
            }
        }
    }
    Ok(ReplicateSummary { rows, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub delta: f64,
    pub x_prime: usize,
    pub x: usize,
    pub mean: f64,
    pub sd: f64,
    pub mc_se: f64,
    pub n_ok: usize,
}

/// Redraw the calibration slope from `Normal(gamma1_hat, (se + delta)^2)` in
/// every replicate and rerun the corrected pipeline, for each delta.
pub fn sensitivity_ladder(
    cfg: &ScenarioConfig,
    method: Method,
    deltas: &[f64],
    study: &StudyConfig,
) -> Result<Vec<LadderRow>> {
    cfg.validate()?;
    let contrasts = adjacent_contrasts(cfg.cutoffs.n_categories());
    let pc = pipeline_config(&cfg.cutoffs, ExposureSource::RcWithCovariates, method, study);
    let per_rep: Vec<Vec<Option<Vec<f64>>>> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(cfg.seed, r as u64);
            let Ok((main, validation)) = generate_scenario(cfg, seed) else {
                return vec![None; deltas.len()];
            };
            let Ok(model) = fit_rc(&validation) else {
                return vec![None; deltas.len()];
            };
            deltas
                .iter()
                .enumerate()
                .map(|(k, &delta)| {
                    let perturbed = perturb_gamma1(&model, delta, derive_seed(seed, 1000 + k as u64)).ok()?;
                    let out = run_pipeline_with_rc(&pc, PipelineInputs::new(&main, Some(&validation)), Some(&perturbed)).ok()?;
                    Some(adjacent_estimates(&out.ate, &contrasts))
                })
                .collect()
        })
        .collect();

    let limit = (study.max_failure_fraction * cfg.replicates as f64).floor() as usize;
    let mut rows = Vec::new();
    for (k, &delta) in deltas.iter().enumerate() {
        let ok: Vec<&Vec<f64>> = per_rep.iter().filter_map(|r| r[k].as_ref()).collect();
        let failed = cfg.replicates - ok.len();
        if failed > limit || ok.len() < 2 {
            return Err(Error::ReplicateFailures {
                failed,
                total: cfg.replicates,
                limit,
                first: format!("perturbation delta {delta}"),
            });
        }
        for (i, &(xp, x)) in contrasts.iter().enumerate() {
            let est: Vec<f64> = ok.iter().map(|v| v[i]).collect();
            let s = sd(&est);
            rows.push(LadderRow {
                delta,
                x_prime: xp,
                x,
                mean: mean(&est),
                sd: s,
                mc_se: s / (est.len() as f64).sqrt(),
                n_ok: ok.len(),
            });
        }
    }
    Ok(rows)
}
