//! Potential-outcome means `E[Y(x)]` per exposure category from the GPS:
//! subclassification on GPS quantiles, inverse probability weighting and
//! one-to-one nearest-neighbour matching with replacement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gps::GpsMatrix;
use crate::stats::{quantile_sorted, sorted_copy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Subclassification,
    Iptw,
    Matching,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Subclassification, Method::Iptw, Method::Matching];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Subclassification => "subclassification",
            Method::Iptw => "iptw",
            Method::Matching => "matching",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Auxiliary {
    /// Kish effective sample size `(sum w)^2 / sum w^2` per category.
    pub effective_sample_sizes: Vec<f64>,
    /// Fraction of units whose IPTW weight hit the cap.
    pub capped_fraction: Option<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialOutcomeEstimates {
    pub method: Method,
    /// `means[x - 1]` estimates `E[Y(x)]`.
    pub means: Vec<f64>,
    pub auxiliary: Auxiliary,
}

fn check_inputs(y: &[f64], xc: &[usize], gps: &GpsMatrix) -> Result<Vec<usize>> {
    let n = gps.n_categories();
    if y.len() != xc.len() || xc.len() != gps.n_rows() {
        return Err(Error::Schema(format!(
            "outcome ({}), exposure ({}) and GPS ({}) lengths differ",
            y.len(),
            xc.len(),
            gps.n_rows()
        )));
    }
    let mut counts = vec![0usize; n];
    for (j, &x) in xc.iter().enumerate() {
        if x < 1 || x > n {
            return Err(Error::InvalidData(format!(
                "unit {} has category {x} outside 1..={n}",
                j + 1
            )));
        }
        counts[x - 1] += 1;
    }
    if let Some(x) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidData(format!("exposure category {} is empty", x + 1)));
    }
    Ok(counts)
}

fn kish(weights: impl Iterator<Item = f64>) -> f64 {
    let (s, s2) = weights.fold((0.0, 0.0), |(a, b), w| (a + w, b + w * w));
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Subclassification

/// How subclass means are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubclassWeighting {
    /// `N_k / N` with `N_k` counting every unit in the subclass.
    #[default]
    AllUnits,
    /// `N_{k,x} / N_x`, counting only units observed in category x.
    CategoryUnits,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubclassOptions {
    pub subclasses: usize,
    /// Error on an empty (subclass, category) cell instead of merging it.
    pub strict: bool,
    pub weighting: SubclassWeighting,
}

impl Default for SubclassOptions {
    fn default() -> Self {
        Self {
            subclasses: 10,
            strict: false,
            weighting: SubclassWeighting::AllUnits,
        }
    }
}

/// Quantile boundaries `q_{x,0..=K}` of each GPS element over all units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubclassSpec {
    pub subclasses: usize,
    pub boundaries: Vec<Vec<f64>>,
}

impl SubclassSpec {
    pub fn from_gps(gps: &GpsMatrix, subclasses: usize) -> Result<Self> {
        if subclasses == 0 {
            return Err(Error::InvalidArgument("need at least one subclass".into()));
        }
        if gps.n_rows() == 0 {
            return Err(Error::InvalidData("no units to subclassify".into()));
        }
        let boundaries = (1..=gps.n_categories())
            .map(|x| {
                let sorted = sorted_copy(&gps.element(x));
                (0..=subclasses)
                    .map(|k| quantile_sorted(&sorted, k as f64 / subclasses as f64))
                    .collect()
            })
            .collect();
        Ok(Self {
            subclasses,
            boundaries,
        })
    }

    /// 0-based subclass of value `p` of element `x`: intervals `[q_{k-1}, q_k)`,
    /// the last one closed.
    pub fn label(&self, x: usize, p: f64) -> usize {
        let b = &self.boundaries[x - 1];
        b[1..self.subclasses].iter().filter(|&&q| q <= p).count()
    }
}

/// Everything subclassification decides about the units: per-element
/// labels after merging empty cells, and the weight each unit carries in
/// the mean of its own category.
#[derive(Debug, Clone, PartialEq)]
pub struct SubclassDesign {
    pub spec: SubclassSpec,
    /// `labels[x - 1][j]`: effective (post-merge) subclass of unit j for element x.
    pub labels: Vec<Vec<usize>>,
    /// `N_k / N` per element and effective subclass.
    pub subclass_weights: Vec<Vec<f64>>,
    pub unit_weights: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn subclassify(xc: &[usize], gps: &GpsMatrix, options: &SubclassOptions) -> Result<SubclassDesign> {
    let ycheck = vec![0.0; xc.len()];
    let counts_by_category = check_inputs(&ycheck, xc, gps)?;
    let spec = SubclassSpec::from_gps(gps, options.subclasses)?;
    let k_total = options.subclasses;
    let n = xc.len();
    let mut labels = Vec::with_capacity(gps.n_categories());
    let mut subclass_weights = Vec::with_capacity(gps.n_categories());
    let mut unit_weights = vec![0.0; n];
    let mut warnings = Vec::new();

    for x in 1..=gps.n_categories() {
        let raw: Vec<usize> = (0..n).map(|j| spec.label(x, gps.prob(j, x))).collect();
        let mut all = vec![0usize; k_total];
        let mut cell = vec![0usize; k_total];
        for (j, &k) in raw.iter().enumerate() {
            all[k] += 1;
            if xc[j] == x {
                cell[k] += 1;
            }
        }
        // Redirect subclasses whose category-x cell is empty to the nearest
        // subclass with a nonempty cell (upper one on equal distance).
        let mut target: Vec<usize> = (0..k_total).collect();
        for k in 0..k_total {
            if all[k] == 0 || cell[k] > 0 {
                continue;
            }
            if options.strict && options.weighting == SubclassWeighting::AllUnits {
                return Err(Error::InvalidData(format!(
                    "subclass {} of GPS element {x} has no units with exposure {x}",
                    k + 1
                )));
            }
            if options.weighting == SubclassWeighting::CategoryUnits {
                continue;
            }
            let nearest = (1..k_total)
                .flat_map(|d| [k.checked_add(d), k.checked_sub(d)])
                .flatten()
                .find(|&c| c < k_total && cell[c] > 0)
                .expect("category is nonempty");
            target[k] = nearest;
            warnings.push(format!(
                "GPS element {x}: subclass {} has no units with exposure {x}; merged into subclass {}",
                k + 1,
                nearest + 1
            ));
        }
        let mut weight_k = vec![0.0; k_total];
        match options.weighting {
            SubclassWeighting::AllUnits => {
                for k in 0..k_total {
                    weight_k[target[k]] += all[k] as f64 / n as f64;
                }
            }
            SubclassWeighting::CategoryUnits => {
                let nx = counts_by_category[x - 1] as f64;
                for k in 0..k_total {
                    weight_k[k] = cell[k] as f64 / nx;
                }
            }
        }
        let effective: Vec<usize> = raw.iter().map(|&k| target[k]).collect();
        for j in 0..n {
            if xc[j] == x {
                let k = effective[j];
                unit_weights[j] = weight_k[k] / cell[k] as f64;
            }
        }
        labels.push(effective);
        subclass_weights.push(weight_k);
    }
    Ok(SubclassDesign {
        spec,
        labels,
        subclass_weights,
        unit_weights,
        warnings,
    })
}

/// `E[Y(x)] = sum_k (N_k / N) mean(Y | subclass k, X_c = x)`.
pub fn estimate_subclassification(
    y: &[f64],
    xc: &[usize],
    gps: &GpsMatrix,
    options: &SubclassOptions,
) -> Result<PotentialOutcomeEstimates> {
    let design = subclassify(xc, gps, options)?;
    Ok(subclass_estimates(y, xc, gps.n_categories(), &design))
}

pub fn subclass_estimates(
    y: &[f64],
    xc: &[usize],
    n_categories: usize,
    design: &SubclassDesign,
) -> PotentialOutcomeEstimates {
    let mut means = vec![0.0; n_categories];
    for j in 0..y.len() {
        means[xc[j] - 1] += design.unit_weights[j] * y[j];
    }
    let ess = (1..=n_categories)
        .map(|x| kish((0..y.len()).filter(|&j| xc[j] == x).map(|j| design.unit_weights[j])))
        .collect();
    PotentialOutcomeEstimates {
        method: Method::Subclassification,
        means,
        auxiliary: Auxiliary {
            effective_sample_sizes: ess,
            capped_fraction: None,
            warnings: design.warnings.clone(),
        },
    }
}

// ---------------------------------------------------------------------------
// Inverse probability of treatment weighting

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IptwOptions {
    /// Weights above the cap are set to the cap; `None` disables capping.
    pub weight_cap: Option<f64>,
    /// Divide by the summed weights of the category instead of by N.
    pub hajek: bool,
}

impl Default for IptwOptions {
    fn default() -> Self {
        Self {
            weight_cap: Some(10.0),
            hajek: false,
        }
    }
}

/// `min(1 / p(X_c,j | c_j), cap)` per unit, and how many hit the cap.
pub fn iptw_weights(xc: &[usize], gps: &GpsMatrix, weight_cap: Option<f64>) -> Result<(Vec<f64>, usize)> {
    let mut capped = 0;
    let weights = xc
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let p = gps.prob(j, x);
            if !(p > 0.0) {
                return Err(Error::PositivityViolation { unit: j + 1, category: x });
            }
            let w = 1.0 / p;
            Ok(match weight_cap {
                Some(cap) if w > cap => {
                    capped += 1;
                    cap
                }
                _ => w,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((weights, capped))
}

/// Horvitz-Thompson form `(1/N) sum_j Y_j I_j(x) w_j` (or the Hajek ratio).
pub fn estimate_iptw(
    y: &[f64],
    xc: &[usize],
    gps: &GpsMatrix,
    options: &IptwOptions,
) -> Result<PotentialOutcomeEstimates> {
    check_inputs(y, xc, gps)?;
    if let Some(cap) = options.weight_cap {
        if !(cap > 0.0) {
            return Err(Error::InvalidArgument(format!("weight cap must be positive, got {cap}")));
        }
    }
    let (weights, capped) = iptw_weights(xc, gps, options.weight_cap)?;
    Ok(iptw_estimates(y, xc, gps.n_categories(), &weights, capped, options.hajek))
}

pub fn iptw_estimates(
    y: &[f64],
    xc: &[usize],
    n_categories: usize,
    weights: &[f64],
    capped: usize,
    hajek: bool,
) -> PotentialOutcomeEstimates {
    let n = y.len() as f64;
    let mut num = vec![0.0; n_categories];
    let mut den = vec![0.0; n_categories];
    for j in 0..y.len() {
        num[xc[j] - 1] += weights[j] * y[j];
        den[xc[j] - 1] += weights[j];
    }
    let means = num
        .iter()
        .zip(&den)
        .map(|(s, d)| if hajek { s / d } else { s / n })
        .collect();
    let ess = (1..=n_categories)
        .map(|x| kish((0..y.len()).filter(|&j| xc[j] == x).map(|j| weights[j])))
        .collect();
    PotentialOutcomeEstimates {
        method: Method::Iptw,
        means,
        auxiliary: Auxiliary {
            effective_sample_sizes: ess,
            capped_fraction: Some(capped as f64 / n),
            warnings: Vec::new(),
        },
    }
}

// ---------------------------------------------------------------------------
// Matching

/// `donors[x - 1][j]` is the unit in category x whose x-th GPS element is
/// closest to unit j's.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchAssignment {
    pub donors: Vec<Vec<usize>>,
}

impl MatchAssignment {
    pub fn for_category(&self, x: usize) -> &[usize] {
        &self.donors[x - 1]
    }
}

/// Nearest donor by absolute difference in the x-th GPS element; ties go
/// to the smallest unit index. Units observed in category x are their own donor.
pub fn match_units(xc: &[usize], gps: &GpsMatrix) -> Result<MatchAssignment> {
    let ycheck = vec![0.0; xc.len()];
    check_inputs(&ycheck, xc, gps)?;
    let n = xc.len();
    let donors = (1..=gps.n_categories())
        .map(|x| {
            let mut pool: Vec<(f64, usize)> = (0..n)
                .filter(|&j| xc[j] == x)
                .map(|j| (gps.prob(j, x), j))
                .collect();
            if pool.is_empty() {
                return Err(Error::InvalidData(format!("no donors with exposure {x}")));
            }
            pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            // run_start[i]: first position holding the same score as position i
            let mut run_start = vec![0usize; pool.len()];
            for i in 1..pool.len() {
                run_start[i] = if pool[i].0 == pool[i - 1].0 { run_start[i - 1] } else { i };
            }
            Ok((0..n)
                .map(|j| {
                    if xc[j] == x {
                        return j;
                    }
                    let target = gps.prob(j, x);
                    let pos = pool.partition_point(|&(p, _)| p < target);
                    let right = (pos < pool.len()).then(|| pool[pos]);
                    let left = (pos > 0).then(|| pool[run_start[pos - 1]]);
                    match (left, right) {
                        (Some(l), Some(r)) => {
                            let dl = target - l.0;
                            let dr = r.0 - target;
                            if dl < dr || (dl == dr && l.1 < r.1) {
                                l.1
                            } else {
                                r.1
                            }
                        }
                        (Some(l), None) => l.1,
                        (None, Some(r)) => r.1,
                        (None, None) => unreachable!("pool is nonempty"),
                    }
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchAssignment { donors })
}

/// `E[Y(x)] = (1/N) sum_j Y_{m(x, p(x|c_j))}`.
pub fn estimate_matching(
    y: &[f64],
    xc: &[usize],
    gps: &GpsMatrix,
) -> Result<(PotentialOutcomeEstimates, MatchAssignment)> {
    check_inputs(y, xc, gps)?;
    let assignment = match_units(xc, gps)?;
    Ok((matching_estimates(y, &assignment), assignment))
}

pub fn matching_estimates(y: &[f64], assignment: &MatchAssignment) -> PotentialOutcomeEstimates {
    let n = y.len();
    let means = assignment
        .donors
        .iter()
        .map(|d| d.iter().map(|&m| y[m]).sum::<f64>() / n as f64)
        .collect();
    let ess = assignment
        .donors
        .iter()
        .map(|d| {
            let mut uses = vec![0.0; n];
            for &m in d {
                uses[m] += 1.0;
            }
            kish(uses.into_iter())
        })
        .collect();
    PotentialOutcomeEstimates {
        method: Method::Matching,
        means,
        auxiliary: Auxiliary {
            effective_sample_sizes: ess,
            capped_fraction: None,
            warnings: Vec::new(),
        },
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub subclass: SubclassOptions,
    pub iptw: IptwOptions,
}

/// The design each method builds, kept for outcome models and balance checks.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodDesign {
    Subclasses(SubclassDesign),
    Weights(Vec<f64>),
    Matched(MatchAssignment),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorOutput {
    pub estimates: PotentialOutcomeEstimates,
    pub design: MethodDesign,
}

pub fn estimate(
    method: Method,
    y: &[f64],
    xc: &[usize],
    gps: &GpsMatrix,
    options: &EstimatorOptions,
) -> Result<EstimatorOutput> {
    check_inputs(y, xc, gps)?;
    let n = gps.n_categories();
    Ok(match method {
        Method::Subclassification => {
            let design = subclassify(xc, gps, &options.subclass)?;
            EstimatorOutput {
                estimates: subclass_estimates(y, xc, n, &design),
                design: MethodDesign::Subclasses(design),
            }
        }
        Method::Iptw => {
            let (weights, capped) = iptw_weights(xc, gps, options.iptw.weight_cap)?;
            EstimatorOutput {
                estimates: iptw_estimates(y, xc, n, &weights, capped, options.iptw.hajek),
                design: MethodDesign::Weights(weights),
            }
        }
        Method::Matching => {
            let assignment = match_units(xc, gps)?;
            EstimatorOutput {
                estimates: matching_estimates(y, &assignment),
                design: MethodDesign::Matched(assignment),
            }
        }
    })
}
