//! Covariate balance (absolute standardized bias) and GPS overlap summaries.
//! Each GPS element is treated as a binary propensity score: category x
//! against every other category.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Method, MethodDesign};
use crate::gps::GpsMatrix;
use crate::stats::{mean, sd};

/// How a method reweights or reshapes the sample when balance is assessed
/// for category `x`.
#[derive(Debug, Clone, Copy)]
pub enum BalanceDesign<'a> {
    None,
    /// Per-unit weights (IPTW: each unit's capped own-category weight).
    Weights(&'a [f64]),
    /// Subclass label per unit for element x and the weight `N_k / N` per subclass.
    Subclasses { labels: &'a [usize], weights: &'a [f64] },
    /// Donor of category x for every unit.
    Matched(&'a [usize]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdDenominator {
    /// Unweighted SD of the covariate over the whole sample.
    #[default]
    Pooled,
    /// Unweighted SD among units with `X_c = x`.
    Treated,
}

fn weighted_mean(v: impl Iterator<Item = (f64, f64)>) -> Option<f64> {
    let (s, w) = v.fold((0.0, 0.0), |(s, t), (x, w)| (s + w * x, t + w));
    (w > 0.0).then(|| s / w)
}

/// Mean difference (group x minus the rest) of `c` under `design`.
fn mean_difference(c: &[f64], xc: &[usize], x: usize, design: BalanceDesign<'_>) -> Result<f64> {
    let n = c.len();
    let empty = || Error::InvalidData(format!("category {x} or its complement is empty under the design"));
    match design {
        BalanceDesign::None => {
            let a = weighted_mean((0..n).filter(|&j| xc[j] == x).map(|j| (c[j], 1.0))).ok_or_else(empty)?;
            let b = weighted_mean((0..n).filter(|&j| xc[j] != x).map(|j| (c[j], 1.0))).ok_or_else(empty)?;
            Ok(a - b)
        }
        BalanceDesign::Weights(w) => {
            let a = weighted_mean((0..n).filter(|&j| xc[j] == x).map(|j| (c[j], w[j]))).ok_or_else(empty)?;
            let b = weighted_mean((0..n).filter(|&j| xc[j] != x).map(|j| (c[j], w[j]))).ok_or_else(empty)?;
            Ok(a - b)
        }
        BalanceDesign::Subclasses { labels, weights } => {
            // Subclasses lacking either group are dropped and the rest renormalized.
            let (mut total, mut wsum) = (0.0, 0.0);
            for (k, &wk) in weights.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let a = weighted_mean((0..n).filter(|&j| labels[j] == k && xc[j] == x).map(|j| (c[j], 1.0)));
                let b = weighted_mean((0..n).filter(|&j| labels[j] == k && xc[j] != x).map(|j| (c[j], 1.0)));
                if let (Some(a), Some(b)) = (a, b) {
                    total += wk * (a - b);
                    wsum += wk;
                }
            }
            if wsum > 0.0 {
                Ok(total / wsum)
            } else {
                Err(empty())
            }
        }
        BalanceDesign::Matched(donors) => {
            // Matched x-donors of the comparison units against those units.
            let others: Vec<usize> = (0..n).filter(|&j| xc[j] != x).collect();
            if others.is_empty() {
                return Err(empty());
            }
            let a = others.iter().map(|&j| c[donors[j]]).sum::<f64>() / others.len() as f64;
            let b = others.iter().map(|&j| c[j]).sum::<f64>() / others.len() as f64;
            Ok(a - b)
        }
    }
}

/// ASB of each covariate for category `x`:
/// `|mean difference under design| / SD` (unweighted, pre-design sample).
pub fn asb(
    covariates: &[(&str, &[f64])],
    xc: &[usize],
    x: usize,
    design: BalanceDesign<'_>,
    denominator: SdDenominator,
) -> Result<Vec<f64>> {
    covariates
        .iter()
        .map(|&(name, c)| {
            if c.len() != xc.len() {
                return Err(Error::Schema(format!("covariate '{name}' has the wrong length")));
            }
            let s = match denominator {
                SdDenominator::Pooled => sd(c),
                SdDenominator::Treated => {
                    let v: Vec<f64> = c.iter().zip(xc).filter(|(_, &k)| k == x).map(|(v, _)| *v).collect();
                    sd(&v)
                }
            };
            if !(s > 0.0) {
                return Err(Error::ConstantCovariate(name.to_string()));
            }
            Ok((mean_difference(c, xc, x, design)? / s).abs())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub confounder: String,
    pub category: usize,
    pub method: Method,
    pub asb_before: f64,
    pub asb_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub kept_fraction: f64,
}

impl BalanceReport {
    /// Confounders whose ASB, averaged over categories, drops after the design.
    pub fn improved_confounders(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for r in &self.rows {
            if !names.contains(&r.confounder) {
                names.push(r.confounder.clone());
            }
        }
        names
            .into_iter()
            .filter(|name| {
                let rows: Vec<&BalanceRow> = self.rows.iter().filter(|r| &r.confounder == name).collect();
                let before = mean(&rows.iter().map(|r| r.asb_before).collect::<Vec<_>>());
                let after = mean(&rows.iter().map(|r| r.asb_after).collect::<Vec<_>>());
                after < before
            })
            .collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "confounder,category,method,asb_before,asb_after")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.confounder, r.category, r.method, r.asb_before, r.asb_after
            )?;
        }
        Ok(())
    }
}

/// Balance before and after `design` for every confounder and category.
pub fn balance_report(
    covariates: &[(&str, &[f64])],
    xc: &[usize],
    n_categories: usize,
    method: Method,
    design: &MethodDesign,
    kept_fraction: f64,
    denominator: SdDenominator,
) -> Result<BalanceReport> {
    let mut rows = Vec::new();
    for x in 1..=n_categories {
        let before = asb(covariates, xc, x, BalanceDesign::None, denominator)?;
        let d = match design {
            MethodDesign::Weights(w) => BalanceDesign::Weights(w),
            MethodDesign::Subclasses(s) => BalanceDesign::Subclasses {
                labels: &s.labels[x - 1],
                weights: &s.subclass_weights[x - 1],
            },
            MethodDesign::Matched(a) => BalanceDesign::Matched(a.for_category(x)),
        };
        let after = asb(covariates, xc, x, d, denominator)?;
        for (i, &(name, _)) in covariates.iter().enumerate() {
            rows.push(BalanceRow {
                confounder: name.to_string(),
                category: x,
                method,
                asb_before: before[i],
                asb_after: after[i],
            });
        }
    }
    Ok(BalanceReport { rows, kept_fraction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementOverlap {
    pub element: usize,
    /// `histograms[g - 1][b]`: units with `X_c = g` whose element falls in bin b.
    pub histograms: Vec<Vec<usize>>,
    /// `(min, max)` of the element among units with `X_c = g`.
    pub ranges: Vec<(f64, f64)>,
    /// Intersection of the group ranges, if nonempty.
    pub intersection: Option<(f64, f64)>,
    /// Fraction of all units inside the intersection.
    pub fraction_inside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapSummary {
    pub bins: usize,
    pub elements: Vec<ElementOverlap>,
}

impl OverlapSummary {
    pub fn complete_overlap(&self) -> bool {
        self.elements.iter().all(|e| e.intersection.is_some())
    }

    /// Long format: one line per (element, group, bin).
    pub fn write_histogram_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "element,group,bin_lower,bin_upper,count")?;
        for e in &self.elements {
            for (g, h) in e.histograms.iter().enumerate() {
                for (b, c) in h.iter().enumerate() {
                    let lo = b as f64 / self.bins as f64;
                    let hi = (b + 1) as f64 / self.bins as f64;
                    writeln!(out, "{},{},{lo},{hi},{c}", e.element, g + 1)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_ranges_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "element,group,min,max")?;
        for e in &self.elements {
            for (g, (lo, hi)) in e.ranges.iter().enumerate() {
                writeln!(out, "{},{},{lo},{hi}", e.element, g + 1)?;
            }
        }
        Ok(())
    }
}

/// Histogram over `[0, 1]` and range table of every GPS element by group.
pub fn overlap_summary(gps: &GpsMatrix, xc: &[usize], bins: usize) -> Result<OverlapSummary> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if xc.len() != gps.n_rows() {
        return Err(Error::Schema("GPS and exposure lengths differ".into()));
    }
    let n = gps.n_categories();
    if let Some(&bad) = xc.iter().find(|&&x| x < 1 || x > n) {
        return Err(Error::InvalidData(format!("category {bad} outside 1..={n}")));
    }
    let elements = (1..=n)
        .map(|e| {
            let mut histograms = vec![vec![0usize; bins]; n];
            let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
            for (j, &g) in xc.iter().enumerate() {
                let p = gps.prob(j, e);
                let b = ((p * bins as f64) as usize).min(bins - 1);
                histograms[g - 1][b] += 1;
                let r = &mut ranges[g - 1];
                r.0 = r.0.min(p);
                r.1 = r.1.max(p);
            }
            let occupied: Vec<&(f64, f64)> = ranges.iter().filter(|r| r.0 <= r.1).collect();
            let lo = occupied.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
            let hi = occupied.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
            let intersection = (lo <= hi).then_some((lo, hi));
            let inside = match intersection {
                Some((lo, hi)) => (0..xc.len())
                    .filter(|&j| (lo..=hi).contains(&gps.prob(j, e)))
                    .count(),
                None => 0,
            };
            ElementOverlap {
                element: e,
                histograms,
                ranges,
                intersection,
                fraction_inside: inside as f64 / xc.len().max(1) as f64,
            }
        })
        .collect();
    Ok(OverlapSummary { bins, elements })
}
