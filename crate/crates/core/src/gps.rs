//! Generalized propensity scores for a categorical exposure: multinomial
//! logistic regression fitted by damped Newton iterations, softmax
//! prediction and overlap trimming.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{quantile_sorted, sorted_copy};
use crate::tabular::TabularDataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpsOptions {
    pub max_iter: usize,
    /// Convergence threshold on the max-norm of the mean log-likelihood gradient.
    pub tolerance: f64,
    /// Ridge penalty (on slopes) used to refit when the unpenalized fit
    /// separates or fails to converge. `None` turns the fallback off.
    pub ridge_fallback: Option<f64>,
}

impl Default for GpsOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tolerance: 1e-8,
            ridge_fallback: None,
        }
    }
}

impl GpsOptions {
    /// Default fallback penalty for a sample of `n` units.
    pub fn default_ridge(n: usize) -> f64 {
        1e-6 * n as f64
    }
}

/// Multinomial logit with the highest category as reference:
/// `ln P(x)/P(n) = eta[x][0] + eta[x][1..] . c` for `x = 1..n-1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsModel {
    pub eta: Vec<Vec<f64>>,
    pub n_categories: usize,
    pub reference_category: usize,
    pub converged: bool,
    pub iterations: usize,
    pub final_gradient_norm: f64,
    pub log_likelihood: f64,
    /// Ridge penalty actually used (0 for the plain maximum-likelihood fit).
    pub ridge: f64,
    /// Penalized log-likelihood after each accepted Newton step (index 0 is the start).
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl GpsModel {
    pub fn n_confounders(&self) -> usize {
        self.eta.first().map_or(0, |r| r.len() - 1)
    }
}

/// Per-unit category probabilities, row-major `N x n`.
#[derive(Debug, Clone, PartialEq)]
pub struct GpsMatrix {
    n_categories: usize,
    probs: Vec<f64>,
}

impl GpsMatrix {
    /// Build from row-major probabilities; rows must be positive and sum to 1.
    pub fn from_rows(n_categories: usize, probs: Vec<f64>) -> Result<Self> {
        if n_categories < 2 || probs.len() % n_categories != 0 {
            return Err(Error::Schema(format!(
                "{} probabilities do not form rows of {n_categories}",
                probs.len()
            )));
        }
        for (j, row) in probs.chunks(n_categories).enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) || (s - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidData(format!(
                    "GPS row {} is not a probability vector: {row:?}",
                    j + 1
                )));
            }
        }
        Ok(Self {
            n_categories,
            probs,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.probs.len() / self.n_categories
    }

    pub fn n_categories(&self) -> usize {
        self.n_categories
    }

    pub fn row(&self, unit: usize) -> &[f64] {
        &self.probs[unit * self.n_categories..(unit + 1) * self.n_categories]
    }

    /// `p(x | c_unit)` for category `x` in `1..=n`.
    pub fn prob(&self, unit: usize, x: usize) -> f64 {
        self.probs[unit * self.n_categories + x - 1]
    }

    /// The x-th GPS element for every unit.
    pub fn element(&self, x: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|j| self.prob(j, x)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(rows.len() * self.n_categories);
        for &r in rows {
            probs.extend_from_slice(self.row(r));
        }
        Self {
            n_categories: self.n_categories,
            probs,
        }
    }

    /// One column per element, named `gps_1..gps_n`, for export.
    pub fn to_dataset(&self) -> Result<TabularDataset> {
        TabularDataset::new(
            (1..=self.n_categories).map(|x| format!("gps_{x}")).collect(),
            (1..=self.n_categories).map(|x| self.element(x)).collect(),
        )
    }
}

/// Row-major design with a leading intercept column.
struct Design {
    n: usize,
    q: usize,
    z: Vec<f64>,
}

impl Design {
    fn new(confounders: &DMatrix<f64>) -> Self {
        let (n, p) = confounders.shape();
        let q = p + 1;
        let mut z = Vec::with_capacity(n * q);
        for i in 0..n {
            z.push(1.0);
            z.extend((0..p).map(|k| confounders[(i, k)]));
        }
        Self { n, q, z }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.q..(i + 1) * self.q]
    }
}

struct Evaluation {
    penalized_ll: f64,
    log_likelihood: f64,
    gradient: Vec<f64>,
    /// Negative Hessian of the penalized log-likelihood.
    information: Option<DMatrix<f64>>,
    min_prob: f64,
}

/// Fill `probs` (length m + 1, reference last) and return the log of the
/// normalizer relative to the max linear predictor.
fn softmax_row(eta: &[f64], m: usize, q: usize, z: &[f64], probs: &mut [f64]) -> (f64, f64) {
    let mut mx = 0.0f64;
    for a in 0..m {
        let lin: f64 = eta[a * q..(a + 1) * q].iter().zip(z).map(|(e, v)| e * v).sum();
        probs[a] = lin;
        mx = mx.max(lin);
    }
    let mut den = (-mx).exp();
    for p in probs.iter_mut().take(m) {
        *p = (*p - mx).exp();
        den += *p;
    }
    probs[m] = (-mx).exp();
    for p in probs.iter_mut() {
        *p /= den;
    }
    (mx, den.ln())
}

fn evaluate(
    design: &Design,
    xc: &[usize],
    m: usize,
    eta: &[f64],
    ridge: f64,
    with_hessian: bool,
) -> Evaluation {
    let q = design.q;
    let dim = m * q;
    // Packed upper triangle of z z' per unit, accumulated per category pair.
    let tri = q * (q + 1) / 2;
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a..m).map(move |b| (a, b))).collect();
    let mut acc = if with_hessian { vec![0.0; pairs.len() * tri] } else { Vec::new() };
    let mut zz = vec![0.0; tri];
    let mut grad = vec![0.0; dim];
    let mut probs = vec![0.0; m + 1];
    let mut ll = 0.0;
    let mut min_prob = f64::INFINITY;

    for i in 0..design.n {
        let z = design.row(i);
        let (mx, log_den) = softmax_row(eta, m, q, z, &mut probs);
        let obs = xc[i] - 1;
        let lin_obs = if obs < m {
            eta[obs * q..(obs + 1) * q].iter().zip(z).map(|(e, v)| e * v).sum::<f64>()
        } else {
            0.0
        };
        ll += lin_obs - mx - log_den;
        for &p in &probs {
            min_prob = min_prob.min(p);
        }
        for (a, g) in grad.chunks_exact_mut(q).enumerate() {
            let r = f64::from(u8::from(obs == a)) - probs[a];
            for (gk, zk) in g.iter_mut().zip(z) {
                *gk += r * zk;
            }
        }
        if with_hessian {
            let mut t = 0;
            for k in 0..q {
                for l in k..q {
                    zz[t] = z[k] * z[l];
                    t += 1;
                }
            }
            for (block, &(a, b)) in acc.chunks_exact_mut(tri).zip(&pairs) {
                let w = if a == b {
                    probs[a] * (1.0 - probs[a])
                } else {
                    -probs[a] * probs[b]
                };
                for (h, v) in block.iter_mut().zip(&zz) {
                    *h += w * v;
                }
            }
        }
    }

    let mut information = with_hessian.then(|| {
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        for (block, &(a, b)) in acc.chunks_exact(tri).zip(&pairs) {
            let mut t = 0;
            for k in 0..q {
                for l in k..q {
                    let v = block[t];
                    t += 1;
                    for (r, c) in [(a * q + k, b * q + l), (a * q + l, b * q + k), (b * q + k, a * q + l), (b * q + l, a * q + k)] {
                        h[(r, c)] = v;
                    }
                }
            }
        }
        h
    });

    let mut penalty = 0.0;
    if ridge > 0.0 {
        for a in 0..m {
            for k in 1..q {
                let idx = a * q + k;
                penalty += eta[idx] * eta[idx];
                grad[idx] -= ridge * eta[idx];
                if let Some(h) = information.as_mut() {
                    h[(idx, idx)] += ridge;
                }
            }
        }
    }
    Evaluation {
        penalized_ll: ll - 0.5 * ridge * penalty,
        log_likelihood: ll,
        gradient: grad,
        information,
        min_prob,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Fit the multinomial logit of `xc` (categories `1..=n_categories`) on the
/// `N x p` confounder matrix.
pub fn fit_multinomial(
    xc: &[usize],
    confounders: &DMatrix<f64>,
    n_categories: usize,
    options: &GpsOptions,
) -> Result<GpsModel> {
    let n = xc.len();
    if n_categories < 2 {
        return Err(Error::InvalidArgument("need at least two categories".into()));
    }
    if confounders.nrows() != n {
        return Err(Error::Schema(format!(
            "confounders have {} rows, exposure has {n}",
            confounders.nrows()
        )));
    }
    let mut counts = vec![0usize; n_categories];
    for (i, &x) in xc.iter().enumerate() {
        if x < 1 || x > n_categories {
            return Err(Error::InvalidData(format!(
                "unit {} has category {x} outside 1..={n_categories}",
                i + 1
            )));
        }
        counts[x - 1] += 1;
    }
    if let Some(x) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidData(format!("exposure category {} is empty", x + 1)));
    }
    let q = confounders.ncols() + 1;
    if n <= n_categories * q {
        return Err(Error::InvalidData(format!(
            "{n} units are too few for a GPS model with {} coefficients",
            n_categories * q
        )));
    }

    let design = Design::new(confounders);
    match newton(&design, xc, &counts, options, 0.0) {
        Ok(model) => Ok(model),
        Err(e) if e.is_convergence() => match options.ridge_fallback {
            Some(lambda) if lambda > 0.0 => newton(&design, xc, &counts, options, lambda),
            _ => Err(e),
        },
        Err(e) => Err(e),
    }
}

fn newton(
    design: &Design,
    xc: &[usize],
    counts: &[usize],
    options: &GpsOptions,
    ridge: f64,
) -> Result<GpsModel> {
    let n_categories = counts.len();
    let m = n_categories - 1;
    let q = design.q;
    let nf = design.n as f64;
    let reference = counts[m] as f64;

    let mut eta = vec![0.0; m * q];
    for a in 0..m {
        eta[a * q] = (counts[a] as f64 / reference).ln();
    }
    let mut ev = evaluate(design, xc, m, &eta, ridge, true);
    let mut trace = vec![ev.penalized_ll];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < options.max_iter {
        if max_abs(&ev.gradient) / nf < options.tolerance {
            converged = true;
            break;
        }
        iterations += 1;
        let info = ev.information.take().expect("hessian requested");
        let Some(chol) = info.cholesky() else {
            return Err(if ev.min_prob < 1e-12 {
                Error::Separation(format!(
                    "information matrix singular with fitted probability {:.3e}",
                    ev.min_prob
                ))
            } else {
                Error::NotConverged {
                    what: "GPS Newton iteration (singular information matrix)".into(),
                    iterations,
                }
            });
        };
        let step = chol.solve(&DVector::from_column_slice(&ev.gradient));

        let mut t = 1.0;
        let mut candidate = vec![0.0; eta.len()];
        let mut accepted = false;
        for _ in 0..50 {
            for (c, (e, s)) in candidate.iter_mut().zip(eta.iter().zip(step.iter())) {
                *c = e + t * s;
            }
            let trial = evaluate(design, xc, m, &candidate, ridge, false);
            if trial.penalized_ll >= ev.penalized_ll - 1e-12 * ev.penalized_ll.abs() {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut eta, &mut candidate);
        ev = evaluate(design, xc, m, &eta, ridge, true);
        trace.push(ev.penalized_ll);

        if ridge == 0.0 && norm(&eta) > 1e3 && ev.min_prob < 1e-12 {
            return Err(Error::Separation(format!(
                "coefficient norm {:.3e} with fitted probability {:.3e}",
                norm(&eta),
                ev.min_prob
            )));
        }
    }
    if !converged && max_abs(&ev.gradient) / nf < options.tolerance {
        converged = true;
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "GPS Newton iteration".into(),
            iterations,
        });
    }
    if ridge == 0.0 && ev.min_prob < 1e-12 {
        return Err(Error::Separation(format!(
            "fitted probability {:.3e} is numerically zero",
            ev.min_prob
        )));
    }

    Ok(GpsModel {
        eta: eta.chunks(q).map(<[f64]>::to_vec).collect(),
        n_categories,
        reference_category: n_categories,
        converged,
        iterations,
        final_gradient_norm: max_abs(&ev.gradient) / nf,
        log_likelihood: ev.log_likelihood,
        ridge,
        trace,
    })
}

/// Softmax of the category linear predictors (reference logit 0).
pub fn predict_gps(model: &GpsModel, confounders: &DMatrix<f64>) -> Result<GpsMatrix> {
    if confounders.ncols() != model.n_confounders() {
        return Err(Error::Schema(format!(
            "GPS model has {} confounders, got {}",
            model.n_confounders(),
            confounders.ncols()
        )));
    }
    let n = confounders.nrows();
    let m = model.n_categories - 1;
    let q = confounders.ncols() + 1;
    let flat: Vec<f64> = model.eta.iter().flatten().copied().collect();
    let design = Design::new(confounders);
    let mut probs = vec![0.0; n * model.n_categories];
    for (i, row) in probs.chunks_mut(model.n_categories).enumerate() {
        softmax_row(&flat, m, q, design.row(i), row);
    }
    Ok(GpsMatrix {
        n_categories: model.n_categories,
        probs,
    })
}

/// How to enforce overlap before estimation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum TrimStrategy {
    #[default]
    None,
    /// Keep units whose every GPS element lies in the intersection of the
    /// per-exposure-group ranges of that element.
    RangeIntersection,
    /// Keep units whose every GPS element lies between its `alpha` and
    /// `1 - alpha` sample quantiles.
    Quantile { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trimmed {
    pub dataset: TabularDataset,
    pub gps: GpsMatrix,
    pub xc: Vec<usize>,
    pub kept: Vec<usize>,
    pub kept_fraction: f64,
}

/// Per element `x`: `[max_g min_{j in g} p(x|c_j), min_g max_{j in g} p(x|c_j)]`
/// over exposure groups `g` present among `units`.
pub fn overlap_intervals(gps: &GpsMatrix, xc: &[usize], units: &[usize]) -> Vec<(f64, f64)> {
    let n = gps.n_categories();
    let mut lo = vec![vec![f64::INFINITY; n]; n];
    let mut hi = vec![vec![f64::NEG_INFINITY; n]; n];
    let mut present = vec![false; n];
    for &j in units {
        let g = xc[j] - 1;
        present[g] = true;
        for x in 0..n {
            let p = gps.prob(j, x + 1);
            lo[g][x] = lo[g][x].min(p);
            hi[g][x] = hi[g][x].max(p);
        }
    }
    (0..n)
        .map(|x| {
            let groups = (0..n).filter(|&g| present[g]);
            let l = groups.clone().map(|g| lo[g][x]).fold(f64::NEG_INFINITY, f64::max);
            let h = groups.map(|g| hi[g][x]).fold(f64::INFINITY, f64::min);
            (l, h)
        })
        .collect()
}

/// Indices of units kept by `strategy`. The range-intersection rule is
/// applied until no further unit is removed, so its output is a fixed point.
pub fn trim_indices(gps: &GpsMatrix, xc: &[usize], strategy: TrimStrategy) -> Result<Vec<usize>> {
    if xc.len() != gps.n_rows() {
        return Err(Error::Schema(format!(
            "{} exposures for {} GPS rows",
            xc.len(),
            gps.n_rows()
        )));
    }
    let n = gps.n_categories();
    let all: Vec<usize> = (0..gps.n_rows()).collect();
    let inside = |j: usize, bounds: &[(f64, f64)]| {
        bounds
            .iter()
            .enumerate()
            .all(|(x, &(l, h))| (l..=h).contains(&gps.prob(j, x + 1)))
    };
    let kept = match strategy {
        TrimStrategy::None => all,
        TrimStrategy::RangeIntersection => {
            let mut kept = all;
            loop {
                let bounds = overlap_intervals(gps, xc, &kept);
                if let Some(x) = bounds.iter().position(|(l, h)| l > h) {
                    return Err(Error::AllTrimmed { element: x + 1 });
                }
                let next: Vec<usize> = kept.iter().copied().filter(|&j| inside(j, &bounds)).collect();
                if next.len() == kept.len() {
                    break kept;
                }
                kept = next;
            }
        }
        TrimStrategy::Quantile { alpha } => {
            if !(0.0..0.5).contains(&alpha) {
                return Err(Error::InvalidArgument(format!(
                    "quantile trimming alpha must lie in [0, 0.5), got {alpha}"
                )));
            }
            let bounds: Vec<(f64, f64)> = (1..=n)
                .map(|x| {
                    let s = sorted_copy(&gps.element(x));
                    (quantile_sorted(&s, alpha), quantile_sorted(&s, 1.0 - alpha))
                })
                .collect();
            all.into_iter().filter(|&j| inside(j, &bounds)).collect()
        }
    };
    if kept.is_empty() {
        return Err(Error::AllTrimmed { element: 1 });
    }
    let mut seen = vec![false; n];
    for &j in &kept {
        seen[xc[j] - 1] = true;
    }
    if let Some(x) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidData(format!(
            "trimming removed every unit of exposure category {}",
            x + 1
        )));
    }
    Ok(kept)
}

/// Apply range-intersection trimming to a dataset and its GPS rows.
pub fn trim_overlap(dataset: &TabularDataset, gps: &GpsMatrix, xc: &[usize]) -> Result<Trimmed> {
    trim_with(dataset, gps, xc, TrimStrategy::RangeIntersection)
}

pub fn trim_with(
    dataset: &TabularDataset,
    gps: &GpsMatrix,
    xc: &[usize],
    strategy: TrimStrategy,
) -> Result<Trimmed> {
    if dataset.n_rows() != gps.n_rows() {
        return Err(Error::Schema(format!(
            "dataset has {} rows, GPS has {}",
            dataset.n_rows(),
            gps.n_rows()
        )));
    }
    let kept = trim_indices(gps, xc, strategy)?;
    Ok(Trimmed {
        dataset: dataset.select_rows(&kept),
        gps: gps.select_rows(&kept),
        xc: kept.iter().map(|&j| xc[j]).collect(),
        kept_fraction: kept.len() as f64 / xc.len().max(1) as f64,
        kept,
    })
}
