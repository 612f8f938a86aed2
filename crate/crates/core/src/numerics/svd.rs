//! Singular value decomposition by one-sided (Hestenes) Jacobi rotations and
//! the Moore–Penrose pseudo-inverse built on it.

use super::matrix::{dot, Matrix, Vector};
use crate::error::{Result, TcmError};

/// Default relative cutoff for [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-12;

/// Knobs for the Jacobi iteration.
#[derive(Clone, Copy, Debug)]
pub struct SvdOptions {
    /// Sweep cap; exceeding it is a numeric failure.
    pub max_sweeps: usize,
    /// Fault-injection hook used by the verification suite: stop after the
    /// first sweep regardless of convergence.
    pub truncate_after_first_sweep: bool,
}

impl Default for SvdOptions {
    fn default() -> Self {
        SvdOptions {
            max_sweeps: 80,
            truncate_after_first_sweep: false,
        }
    }
}

/// Thin SVD `a = u * diag(s) * v^T`.
///
/// For an `m x n` input with `r = min(m, n)`, `u` is `m x r`, `s` has length
/// `r` (non-negative, non-increasing) and `v` is `n x r`. Columns of `u` and
/// `v` are orthonormal even when `a` is rank deficient.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vector,
    pub v: Matrix,
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    svd_with(a, &SvdOptions::default())
}

pub fn svd_with(a: &Matrix, opts: &SvdOptions) -> Result<Svd> {
    if !a.is_finite() {
        return Err(TcmError::numeric(
            format!("svd of {}x{} matrix", a.rows(), a.cols()),
            "non-finite input",
        ));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a, opts)
    } else {
        let t = jacobi_tall(&a.transpose(), opts)?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Works on columns of a
/// column-major copy so rotations touch contiguous memory.
fn jacobi_tall(a: &Matrix, opts: &SvdOptions) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let tol = 1e-15;

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged {
        if sweeps == opts.max_sweeps {
            return Err(TcmError::numeric(
                format!("svd of {m}x{n} matrix"),
                format!("Jacobi did not converge in {} sweeps", opts.max_sweeps),
            ));
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated || opts.truncate_after_first_sweep;
    }

    let mut sv: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (dot(c, c).sqrt(), j))
        .collect();
    sv.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));

    let smax = sv.first().map_or(0.0, |x| x.0);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    for (out_j, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        for i in 0..n {
            v.set(i, out_j, vcols[j][i]);
        }
        if sigma > smax * 1e-15 && sigma > f64::MIN_POSITIVE {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            u_cols.push(Vec::new());
        }
    }
    complete_orthonormal(&mut u_cols, m);

    let mut u = Matrix::zeros(m, n);
    for (j, c) in u_cols.iter().enumerate() {
        for i in 0..m {
            u.set(i, j, c[i]);
        }
    }
    Ok(Svd { u, s, v })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills empty columns (null singular directions) with unit vectors
/// orthogonal to every other column, by Gram–Schmidt on the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], m: usize) {
    let mut candidate = 0;
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        while candidate < m {
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let proj = dot(&e, other);
                    e.iter_mut().zip(other).for_each(|(x, o)| *x -= proj * o);
                }
            }
            let norm = dot(&e, &e).sqrt();
            if norm > 1e-8 {
                e.iter_mut().for_each(|x| *x /= norm);
                cols[j] = e;
                break;
            }
        }
    }
}

/// Moore–Penrose pseudo-inverse. Singular values below `rcond * s_max` are
/// treated as zero.
pub fn pinv(a: &Matrix, rcond: f64) -> Result<Matrix> {
    pinv_with(a, rcond, &SvdOptions::default())
}

pub fn pinv_with(a: &Matrix, rcond: f64, opts: &SvdOptions) -> Result<Matrix> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(TcmError::Contract(format!(
            "rcond must lie in (0, 1), got {rcond}"
        )));
    }
    let Svd { u, s, v } = svd_with(a, opts)?;
    let smax = s.first().copied().unwrap_or(0.0);
    let cutoff = rcond * smax;
    let (m, n) = a.shape();
    let mut out = Matrix::zeros(n, m);
    for (k, &sigma) in s.iter().enumerate() {
        if sigma <= cutoff || sigma == 0.0 {
            continue;
        }
        let inv = 1.0 / sigma;
        for i in 0..n {
            let vik = v.get(i, k) * inv;
            if vik == 0.0 {
                continue;
            }
            for j in 0..m {
                let cur = out.get(i, j);
                out.set(i, j, cur + vik * u.get(j, k));
            }
        }
    }
    Ok(out)
}

/// Largest entrywise residual over the four Penrose conditions.
pub fn penrose_residual(a: &Matrix, a_pinv: &Matrix) -> Result<f64> {
    let aap = a.matmul(a_pinv)?;
    let apa = a_pinv.matmul(a)?;
    let c1 = aap.matmul(a)?.max_abs_diff(a);
    let c2 = apa.matmul(a_pinv)?.max_abs_diff(a_pinv);
    let c3 = aap.transpose().max_abs_diff(&aap);
    let c4 = apa.transpose().max_abs_diff(&apa);
    Ok(c1.max(c2).max(c3).max(c4))
}
