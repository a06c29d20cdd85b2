//! Column-oriented numeric tables with per-column roles, exposure
//! categorization and grid-to-region aggregation.

mod aggregate;
mod csv_io;

pub use aggregate::{aggregate_regions, GridLink, GridRegionMap};
pub use csv_io::{read_csv, read_csv_from, write_csv, write_csv_to};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a column means to the estimation pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Outcome,
    TrueExposure,
    ErrorProneExposure,
    CategoricalExposure,
    Confounder,
    CalibrationCovariate,
    Offset,
    Stratum,
    RegionId,
    Weight,
}

/// Ordered column-to-role assignments. A column may carry several roles
/// (a calibration covariate can also be a confounder); the order of
/// assignment fixes the order of multi-column roles.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMap {
    assignments: Vec<(String, Role)>,
}

impl RoleMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn assign(&mut self, column: impl Into<String>, role: Role) -> &mut Self {
        let column = column.into();
        if !self.assignments.iter().any(|(c, r)| *c == column && *r == role) {
            self.assignments.push((column, role));
        }
        self
    }

    pub fn with(mut self, column: impl Into<String>, role: Role) -> Self {
        self.assign(column, role);
        self
    }

    /// Columns carrying `role`, in assignment order.
    pub fn columns(&self, role: Role) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, r)| *r == role)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    /// The unique column carrying `role`, if any.
    pub fn single(&self, role: Role) -> Result<Option<&str>> {
        let cols = self.columns(role);
        match cols.len() {
            0 => Ok(None),
            1 => Ok(Some(cols[0])),
            _ => Err(Error::Schema(format!(
                "role {role:?} assigned to several columns: {}",
                cols.join(", ")
            ))),
        }
    }

    pub fn assignments(&self) -> &[(String, Role)] {
        &self.assignments
    }

    pub fn is_role_bearing(&self, column: &str) -> bool {
        self.assignments.iter().any(|(c, _)| c == column)
    }
}

/// A numeric table: named columns of equal length plus role assignments.
/// Immutable once built; row selection produces a new table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
    roles: RoleMap,
}

impl TabularDataset {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema(format!(
                "{} names for {} columns",
                names.len(),
                columns.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name '{name}'")));
            }
        }
        let n_rows = columns.first().map_or(0, Vec::len);
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::Schema(format!(
                    "column '{name}' has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
        }
        Ok(Self {
            names,
            columns,
            n_rows,
            roles: RoleMap::new(),
        })
    }

    /// Attach roles; every referenced column must exist and hold finite values.
    pub fn with_roles(mut self, roles: RoleMap) -> Result<Self> {
        for (column, _) in roles.assignments() {
            let values = self.column(column)?;
            if let Some(row) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "non-finite value in column '{column}' at row {}",
                    row + 1
                )));
            }
        }
        self.roles = roles;
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn roles(&self) -> &RoleMap {
        &self.roles
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))
    }

    /// The column carrying a single-column role.
    pub fn role_column(&self, role: Role) -> Result<&[f64]> {
        match self.roles.single(role)? {
            Some(name) => self.column(name),
            None => Err(Error::Schema(format!("no column has role {role:?}"))),
        }
    }

    pub fn optional_role_column(&self, role: Role) -> Result<Option<&[f64]>> {
        self.roles.single(role)?.map(|n| self.column(n)).transpose()
    }

    /// All columns carrying a multi-column role, in assignment order.
    pub fn role_columns(&self, role: Role) -> Result<Vec<&[f64]>> {
        self.roles
            .columns(role)
            .into_iter()
            .map(|n| self.column(n))
            .collect()
    }

    /// Add or replace a column.
    pub fn with_column(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if !self.columns.is_empty() && values.len() != self.n_rows {
            return Err(Error::Schema(format!(
                "column '{name}' has {} rows, expected {}",
                values.len(),
                self.n_rows
            )));
        }
        if self.columns.is_empty() {
            self.n_rows = values.len();
        }
        match self.names.iter().position(|n| *n == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.names.push(name);
                self.columns.push(values);
            }
        }
        Ok(self)
    }

    /// New table holding the given rows (in the given order, repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect();
        Self {
            names: self.names.clone(),
            columns,
            n_rows: rows.len(),
            roles: self.roles.clone(),
        }
    }

    /// First `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.n_rows);
        let rows: Vec<usize> = (0..n).collect();
        self.select_rows(&rows)
    }

    /// Read a categorical column, checking every value is an integer in `1..=n`.
    pub fn categorical_column(&self, name: &str, n_categories: usize) -> Result<Vec<usize>> {
        self.column(name)?
            .iter()
            .enumerate()
            .map(|(row, &v)| {
                if v.fract() == 0.0 && v >= 1.0 && v <= n_categories as f64 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidData(format!(
                        "column '{name}' row {}: {v} is not a category in 1..={n_categories}",
                        row + 1
                    )))
                }
            })
            .collect()
    }
}

/// Strictly increasing interior cutoffs `k_1 < ... < k_{n-1}` defining
/// `n` categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CutoffSpec {
    thresholds: Vec<f64>,
}

impl CutoffSpec {
    pub fn new(thresholds: Vec<f64>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(Error::InvalidSpec("at least one cutoff is required".into()));
        }
        if thresholds.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidSpec("cutoffs must be finite".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidSpec(format!(
                "cutoffs must be strictly increasing, got {thresholds:?}"
            )));
        }
        Ok(Self { thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn n_categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    /// Category of one value: `c` such that `k_{c-1} < x <= k_c`.
    pub fn category_of(&self, x: f64) -> usize {
        self.thresholds.partition_point(|&k| k < x) + 1
    }
}

impl TryFrom<Vec<f64>> for CutoffSpec {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CutoffSpec> for Vec<f64> {
    fn from(c: CutoffSpec) -> Self {
        c.thresholds
    }
}

/// Map continuous values onto categories `1..=n` using left-open,
/// right-closed intervals.
pub fn categorize(x: &[f64], cutoffs: &CutoffSpec) -> Result<Vec<usize>> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            if v.is_finite() {
                Ok(cutoffs.category_of(v))
            } else {
                Err(Error::InvalidData(format!(
                    "non-finite exposure at row {}",
                    i + 1
                )))
            }
        })
        .collect()
}
