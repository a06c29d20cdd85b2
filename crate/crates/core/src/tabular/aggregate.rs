use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLink {
    pub region_id: i64,
    pub grid_id: i64,
    pub area_weight: f64,
}

/// Which grid cells cover which region, with precomputed area weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRegionMap {
    links: Vec<GridLink>,
}

impl GridRegionMap {
    pub fn new(links: Vec<GridLink>) -> Result<Self> {
        for l in &links {
            if !(l.area_weight.is_finite() && l.area_weight >= 0.0) {
                return Err(Error::InvalidData(format!(
                    "region {} grid {}: area weight {} must be finite and nonnegative",
                    l.region_id, l.grid_id, l.area_weight
                )));
            }
        }
        let mut totals: BTreeMap<i64, f64> = BTreeMap::new();
        for l in &links {
            *totals.entry(l.region_id).or_default() += l.area_weight;
        }
        if let Some((region, _)) = totals.iter().find(|(_, &t)| t <= 0.0) {
            return Err(Error::DegenerateWeights {
                region: region.to_string(),
            });
        }
        Ok(Self { links })
    }

    /// Build from three parallel columns (ids must be integral).
    pub fn from_columns(region: &[f64], grid: &[f64], weight: &[f64]) -> Result<Self> {
        let as_id = |v: f64, what: &str| -> Result<i64> {
            if v.fract() == 0.0 && v.abs() < 9.0e15 {
                Ok(v as i64)
            } else {
                Err(Error::InvalidData(format!("{what} {v} is not an integer id")))
            }
        };
        let links = region
            .iter()
            .zip(grid)
            .zip(weight)
            .map(|((&r, &g), &w)| {
                Ok(GridLink {
                    region_id: as_id(r, "region id")?,
                    grid_id: as_id(g, "grid id")?,
                    area_weight: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(links)
    }

    pub fn links(&self) -> &[GridLink] {
        &self.links
    }
}

/// Area-weighted mean of grid values per region: `sum(w_g v_g) / sum(w_g)`.
pub fn aggregate_regions(
    grid_values: &BTreeMap<i64, f64>,
    map: &GridRegionMap,
) -> Result<BTreeMap<i64, f64>> {
    let mut acc: BTreeMap<i64, (f64, f64)> = BTreeMap::new();
    for l in map.links() {
        let v = grid_values.get(&l.grid_id).ok_or_else(|| {
            Error::InvalidData(format!("grid {} has no value", l.grid_id))
        })?;
        let e = acc.entry(l.region_id).or_default();
        e.0 += l.area_weight * v;
        e.1 += l.area_weight;
    }
    acc.into_iter()
        .map(|(region, (num, den))| {
            if den > 0.0 {
                Ok((region, num / den))
            } else {
                Err(Error::DegenerateWeights {
                    region: region.to_string(),
                })
            }
        })
        .collect()
}
