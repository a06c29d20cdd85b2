//! Weighted least squares via Householder QR.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative size of a QR pivot below which a column counts as collinear.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct LeastSquaresFit {
    pub coefficients: Vec<f64>,
    /// `sigma^2 (X'WX)^-1`.
    pub covariance: DMatrix<f64>,
    /// `(X'WX)^-1`.
    pub unscaled_covariance: DMatrix<f64>,
    pub rss: f64,
    pub df_resid: usize,
    pub residual_variance: f64,
    pub r_squared: f64,
}

impl LeastSquaresFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len())
            .map(|i| self.covariance[(i, i)].max(0.0).sqrt())
            .collect()
    }
}

/// Solve `min sum_i w_i (y_i - x_i'b)^2`. The design is consumed. `names`
/// labels the columns for singular-design errors.
pub fn least_squares(
    mut design: DMatrix<f64>,
    y: &[f64],
    weights: Option<&[f64]>,
    names: &[String],
) -> Result<LeastSquaresFit> {
    let (n, p) = design.shape();
    if y.len() != n || weights.is_some_and(|w| w.len() != n) || names.len() != p {
        return Err(Error::Schema(format!(
            "least squares: design {n}x{p}, response {}, {} names",
            y.len(),
            names.len()
        )));
    }
    if n <= p {
        return Err(Error::InvalidData(format!(
            "need more rows ({n}) than coefficients ({p})"
        )));
    }
    let mut rhs = DVector::from_column_slice(y);
    if let Some(w) = weights {
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidData(format!("weight {} at row {} is invalid", w[i], i + 1)));
        }
        for (i, wi) in w.iter().enumerate() {
            let s = wi.sqrt();
            rhs[i] *= s;
            design.row_mut(i).scale_mut(s);
        }
    }
    let col_norms: Vec<f64> = (0..p).map(|j| design.column(j).norm()).collect();

    let qr = design.qr();
    let r = qr.r();
    let collinear: Vec<String> = (0..p)
        .filter(|&j| col_norms[j] == 0.0 || r[(j, j)].abs() <= RANK_TOL * col_norms[j])
        .map(|j| names[j].clone())
        .collect();
    if !collinear.is_empty() {
        return Err(Error::SingularDesign { columns: collinear });
    }

    qr.q_tr_mul(&mut rhs);
    let qty = rhs.rows(0, p).into_owned();
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::SingularDesign { columns: names.to_vec() })?;
    // Residual sum of squares is the tail of Q'y.
    let rss: f64 = rhs.rows(p, n - p).norm_squared();

    let df_resid = n - p;
    let residual_variance = rss / df_resid as f64;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| Error::SingularDesign { columns: names.to_vec() })?;
    let unscaled_covariance = &r_inv * r_inv.transpose();
    let covariance = &unscaled_covariance * residual_variance;

    let (sw, swy) = match weights {
        Some(w) => (w.iter().sum::<f64>(), w.iter().zip(y).map(|(a, b)| a * b).sum::<f64>()),
        None => (n as f64, y.iter().sum::<f64>()),
    };
    let ybar = swy / sw;
    let tss: f64 = match weights {
        Some(w) => w.iter().zip(y).map(|(wi, yi)| wi * (yi - ybar).powi(2)).sum(),
        None => y.iter().map(|yi| (yi - ybar).powi(2)).sum(),
    };
    let r_squared = if rss == 0.0 {
        1.0
    } else if tss > 0.0 {
        (1.0 - rss / tss).clamp(0.0, 1.0)
    } else {
        0.0
    };

    Ok(LeastSquaresFit {
        coefficients: beta.iter().copied().collect(),
        covariance,
        unscaled_covariance,
        rss,
        df_resid,
        residual_variance,
        r_squared,
    })
}
