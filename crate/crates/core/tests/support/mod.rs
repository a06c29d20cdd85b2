//! Independent reference implementations used as test oracles. They follow
//! the textbook definitions directly and share no code with the library.

#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

pub type Q = BigRational;

pub fn q(v: f64) -> Q {
    BigRational::from_float(v).expect("finite")
}

pub fn qi(n: i64, d: i64) -> Q {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

pub fn f(v: &Q) -> f64 {
    v.to_f64().expect("representable")
}

/// Exact solution of `A b = r` by Gauss-Jordan elimination over the rationals.
pub fn solve_rational(mut a: Vec<Vec<Q>>, mut r: Vec<Q>) -> Vec<Q> {
    let p = r.len();
    for col in 0..p {
        let piv = (col..p).find(|&i| !a[i][col].is_zero()).expect("nonsingular system");
        a.swap(col, piv);
        r.swap(col, piv);
        let d = a[col][col].clone();
        for j in 0..p {
            a[col][j] = &a[col][j] / &d;
        }
        r[col] = &r[col] / &d;
        for i in 0..p {
            if i != col && !a[i][col].is_zero() {
                let m = a[i][col].clone();
                for j in 0..p {
                    let t = &m * &a[col][j];
                    a[i][j] = &a[i][j] - t;
                }
                let t = &m * &r[col];
                r[i] = &r[i] - t;
            }
        }
    }
    r
}

/// Weighted least squares through the exact normal equations `X'WX b = X'Wy`.
pub fn normal_equations(x: &[Vec<f64>], y: &[f64], w: Option<&[f64]>) -> Vec<f64> {
    let p = x[0].len();
    let xr: Vec<Vec<Q>> = x.iter().map(|row| row.iter().map(|&v| q(v)).collect()).collect();
    let yr: Vec<Q> = y.iter().map(|&v| q(v)).collect();
    let wr: Vec<Q> = match w {
        Some(w) => w.iter().map(|&v| q(v)).collect(),
        None => vec![Q::one(); y.len()],
    };
    let mut a = vec![vec![Q::zero(); p]; p];
    let mut r = vec![Q::zero(); p];
    for i in 0..y.len() {
        for j in 0..p {
            let wx = &wr[i] * &xr[i][j];
            for k in j..p {
                a[j][k] = &a[j][k] + &wx * &xr[i][k];
            }
            r[j] = &r[j] + &wx * &yr[i];
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[j][k] = a[k][j].clone();
        }
    }
    solve_rational(a, r).iter().map(f).collect()
}

/// Dense solve with partial pivoting in f64.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let piv = (c..n)
            .max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))
            .unwrap();
        a.swap(c, piv);
        b.swap(c, piv);
        for i in c + 1..n {
            let m = a[i][c] / a[c][c];
            for j in c..n {
                a[i][j] -= m * a[c][j];
            }
            b[i] -= m * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x
}

/// Binary logistic regression of `y` (0/1) on `[1, x]` by plain Newton steps.
pub fn logistic_newton(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
    let p = x[0].len() + 1;
    let row = |i: usize| -> Vec<f64> {
        let mut r = vec![1.0];
        r.extend_from_slice(&x[i]);
        r
    };
    let mut beta = vec![0.0; p];
    for _ in 0..200 {
        let mut g = vec![0.0; p];
        let mut h = vec![vec![0.0; p]; p];
        for i in 0..y.len() {
            let r = row(i);
            let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let mu = 1.0 / (1.0 + (-eta).exp());
            for j in 0..p {
                g[j] += (y[i] - mu) * r[j];
                for k in 0..p {
                    h[j][k] += mu * (1.0 - mu) * r[j] * r[k];
                }
            }
        }
        let step = gauss_solve(h, g);
        for j in 0..p {
            beta[j] += step[j];
        }
        if step.iter().all(|s| s.abs() < 1e-13) {
            break;
        }
    }
    beta
}

// ---------------------------------------------------------------------------
// Brute-force estimators over the rationals. `gps[j][x - 1]` is p(x | c_j).

fn quantile7(values: &[Q], prob: &Q) -> Q {
    let mut s = values.to_vec();
    s.sort();
    let n = s.len();
    let h = prob * Q::from_integer(BigInt::from(n - 1));
    let lo = h.floor();
    let lo_i = lo.to_integer().to_usize().unwrap();
    let hi_i = (lo_i + 1).min(n - 1);
    let frac = &h - &lo;
    &s[lo_i] + frac * (&s[hi_i] - &s[lo_i])
}

/// Subclassification with `k` quantile subclasses per element; empty cells
/// merge into the nearest subclass holding category-x units (upper on ties).
pub fn subclass_oracle(y: &[Q], xc: &[usize], gps: &[Vec<Q>], k: usize) -> Vec<Q> {
    let n_cat = gps[0].len();
    let n = y.len();
    (1..=n_cat)
        .map(|x| {
            let e: Vec<Q> = gps.iter().map(|r| r[x - 1].clone()).collect();
            let bounds: Vec<Q> = (0..=k)
                .map(|i| quantile7(&e, &qi(i as i64, k as i64)))
                .collect();
            let label = |v: &Q| (1..k).filter(|&i| &bounds[i] <= v).count();
            let labels: Vec<usize> = e.iter().map(label).collect();
            let size = |s: usize| labels.iter().filter(|&&l| l == s).count();
            let units_x = |s: usize| -> Vec<usize> {
                (0..n).filter(|&j| labels[j] == s && xc[j] == x).collect()
            };
            let mut weight = vec![Q::zero(); k];
            for s in 0..k {
                if size(s) == 0 {
                    continue;
                }
                let mut t = s;
                if units_x(s).is_empty() {
                    t = (1..k)
                        .flat_map(|d| [s as i64 + d as i64, s as i64 - d as i64])
                        .filter(|&c| c >= 0 && (c as usize) < k)
                        .map(|c| c as usize)
                        .find(|&c| !units_x(c).is_empty())
                        .unwrap();
                }
                weight[t] = &weight[t] + qi(size(s) as i64, n as i64);
            }
            (0..k)
                .filter(|&s| !units_x(s).is_empty())
                .map(|s| {
                    let u = units_x(s);
                    let m = u.iter().fold(Q::zero(), |a, &j| a + &y[j]) / Q::from_integer(BigInt::from(u.len()));
                    &weight[s] * m
                })
                .fold(Q::zero(), |a, b| a + b)
        })
        .collect()
}

pub fn iptw_oracle(y: &[Q], xc: &[usize], gps: &[Vec<Q>], cap: Option<Q>) -> Vec<Q> {
    let n_cat = gps[0].len();
    let n = Q::from_integer(BigInt::from(y.len()));
    (1..=n_cat)
        .map(|x| {
            let total = (0..y.len())
                .filter(|&j| xc[j] == x)
                .map(|j| {
                    let mut w = gps[j][x - 1].recip();
                    if let Some(c) = &cap {
                        if &w > c {
                            w = c.clone();
                        }
                    }
                    &y[j] * w
                })
                .fold(Q::zero(), |a, b| a + b);
            total / &n
        })
        .collect()
}

/// Exhaustive nearest-donor search; own category matches itself.
pub fn matching_oracle(y: &[Q], xc: &[usize], gps: &[Vec<Q>]) -> (Vec<Q>, Vec<Vec<usize>>) {
    let n_cat = gps[0].len();
    let n = y.len();
    let mut donors = Vec::new();
    let means = (1..=n_cat)
        .map(|x| {
            let d: Vec<usize> = (0..n)
                .map(|j| {
                    if xc[j] == x {
                        return j;
                    }
                    let mut best: Option<(Q, usize)> = None;
                    for i in 0..n {
                        if xc[i] != x {
                            continue;
                        }
                        let dist = (&gps[i][x - 1] - &gps[j][x - 1]).abs();
                        if best.as_ref().is_none_or(|(b, _)| &dist < b) {
                            best = Some((dist, i));
                        }
                    }
                    best.unwrap().1
                })
                .collect();
            let m = d.iter().fold(Q::zero(), |a, &i| a + &y[i]) / Q::from_integer(BigInt::from(n));
            donors.push(d);
            m
        })
        .collect();
    (means, donors)
}
