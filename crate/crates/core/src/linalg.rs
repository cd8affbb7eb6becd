//! Dense linear-algebra helpers shared by the solvers and checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let x = a.clone().lu().solve(b).ok_or(Error::Singular(what))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what))
    }
}

pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &'static str) -> Result<DVector<f64>> {
    let x = a.clone().lu().solve(b).ok_or(Error::Singular(what))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Singular(what))
    }
}

/// Numerical rank by Gaussian elimination with full pivoting.
pub fn rank(a: &DMatrix<f64>, rel_tol: f64) -> usize {
    let mut m = a.clone();
    let (rows, cols) = m.shape();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut r = 0;
    while r < rows.min(cols) {
        let mut best = (r, r, 0.0f64);
        for i in r..rows {
            for j in r..cols {
                let v = m[(i, j)].abs();
                if v > best.2 {
                    best = (i, j, v);
                }
            }
        }
        if best.2 <= rel_tol * scale {
            break;
        }
        m.swap_rows(r, best.0);
        m.swap_columns(r, best.1);
        let pivot = m[(r, r)];
        for i in (r + 1)..rows {
            let factor = m[(i, r)] / pivot;
            if factor != 0.0 {
                for j in r..cols {
                    let sub = factor * m[(r, j)];
                    m[(i, j)] -= sub;
                }
            }
        }
        r += 1;
    }
    r
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

pub fn sup_norm(v: &DVector<f64>) -> f64 {
    v.amax()
}

pub fn mat_sup_entry(a: &DMatrix<f64>) -> f64 {
    a.amax()
}

/// Pairwise summation; result depends only on the slice order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}
