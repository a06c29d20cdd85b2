//! Average treatment effect contrasts, GLM outcome models and bootstrap
//! inference.

mod bootstrap;
mod glm;

pub use bootstrap::{bootstrap_ate, default_m, BootstrapConfig, BootstrapMode, BootstrapResult};
pub use glm::{
    fit_glm, fit_outcome_glm, glm_contrasts, outcome_data, GlmData, Link, OutcomeModel, OutcomeSpec,
};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{Method, PotentialOutcomeEstimates};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Difference,
    Ratio,
}

impl Scale {
    pub fn as_str(self) -> &'static str {
        match self {
            Scale::Difference => "difference",
            Scale::Ratio => "ratio",
        }
    }
}

/// `ATE(x'; x)` on one scale; `se` and the interval are filled by the bootstrap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AteRow {
    pub x_prime: usize,
    pub x: usize,
    pub scale: Scale,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AteTable {
    pub rows: Vec<AteRow>,
}

impl AteTable {
    pub fn get(&self, x_prime: usize, x: usize, scale: Scale) -> Option<&AteRow> {
        self.rows
            .iter()
            .find(|r| r.x_prime == x_prime && r.x == x && r.scale == scale)
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.estimate).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "x_prime,x,scale,estimate,se,ci_lower,ci_upper,method")?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.x_prime,
                r.x,
                r.scale.as_str(),
                r.estimate,
                opt(r.se),
                opt(r.ci_lower),
                opt(r.ci_upper),
                r.method
            )?;
        }
        Ok(())
    }
}

/// Every ordered pair `x' != x` on each requested scale, in `(x', x, scale)` order.
pub fn ate_contrasts(est: &PotentialOutcomeEstimates, scales: &[Scale]) -> Result<AteTable> {
    let means = &est.means;
    if let Some(x) = means.iter().position(|m| !m.is_finite()) {
        return Err(Error::InvalidData(format!(
            "potential-outcome mean for category {} is not finite",
            x + 1
        )));
    }
    let n = means.len();
    let mut rows = Vec::with_capacity(n * n.saturating_sub(1) * scales.len());
    for xp in 1..=n {
        for x in 1..=n {
            if xp == x {
                continue;
            }
            for &scale in scales {
                let estimate = match scale {
                    Scale::Difference => means[xp - 1] - means[x - 1],
                    Scale::Ratio => {
                        for (&v, &(to, from)) in [means[x - 1], means[xp - 1]].iter().zip(&[(xp, x), (x, xp)]) {
                            if !(v > 0.0) {
                                return Err(Error::ScaleUnavailable { to, from, denominator: v });
                            }
                        }
                        means[xp - 1] / means[x - 1]
                    }
                };
                rows.push(AteRow {
                    x_prime: xp,
                    x,
                    scale,
                    estimate,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                    method: est.method,
                });
            }
        }
    }
    Ok(AteTable { rows })
}
