//! Dense decompositions: one-sided Jacobi SVD, Householder QR, cyclic Jacobi
//! symmetric eigendecomposition and an LU solver. Sized for matrices of at most
//! a few hundred rows/columns.

use super::matrix::{dot, Matrix};
use crate::error::{invalid, Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `m = u · diag(s) · vᵀ` with `r = min(rows, cols)` components.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.rows() == 0 || m.cols() == 0 {
        return invalid("svd of an empty matrix");
    }
    if !m.is_finite() {
        return invalid("svd input has non-finite entries");
    }
    if m.rows() >= m.cols() {
        Ok(jacobi_svd(m))
    } else {
        // Work on the tall transpose, then swap roles.
        let t = jacobi_svd(&m.transpose());
        let mut out = SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// One-sided (Hestenes) Jacobi for `rows >= cols`.
fn jacobi_svd(m: &Matrix) -> SvdResult {
    let (rows, n) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let s_max = norms[order[0]];
    let tol = s_max * (rows.max(n) as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(rows, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (out_j, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        vm.set_column(out_j, &v[j]);
        if norms[j] > tol && norms[j] > 0.0 {
            let col: Vec<f64> = a[j].iter().map(|x| x / norms[j]).collect();
            u.set_column(out_j, &col);
        } else {
            missing.push(out_j);
        }
    }
    complete_orthonormal(&mut u, &missing);

    let mut out = SvdResult { u, s, v: vm };
    fix_signs(&mut out);
    out
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

/// Fills the listed columns of `u` with unit vectors orthogonal to every other
/// column, by Gram-Schmidt against the standard basis.
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let rows = u.rows();
    let mut filled: Vec<usize> = (0..u.cols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &j in missing {
        while basis < rows {
            let mut cand = vec![0.0; rows];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let col = u.column(f);
                    let proj = dot(&col, &cand);
                    for (c, x) in cand.iter_mut().zip(&col) {
                        *c -= proj * x;
                    }
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                let col: Vec<f64> = cand.iter().map(|x| x / norm).collect();
                u.set_column(j, &col);
                filled.push(j);
                break;
            }
        }
    }
}

/// First entry of each left singular vector with |x| > 1e-12 is made nonnegative.
fn fix_signs(out: &mut SvdResult) {
    for j in 0..out.s.len() {
        let col = out.u.column(j);
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for i in 0..out.u.rows() {
                    out.u[(i, j)] = -out.u[(i, j)];
                }
                for i in 0..out.v.rows() {
                    out.v[(i, j)] = -out.v[(i, j)];
                }
            }
        }
    }
}

/// Orthonormal basis `Q` (rows × cols) of the column span of a full-column-rank
/// matrix. Column signs are chosen so that `R` has a positive diagonal.
pub fn qr_orthonormal(m: &Matrix) -> Result<Matrix> {
    let (rows, n) = m.shape();
    if n == 0 || rows < n {
        return invalid(format!("qr needs rows >= cols >= 1, got {rows}x{n}"));
    }
    if !m.is_finite() {
        return invalid("qr input has non-finite entries");
    }
    let scale = (0..n)
        .map(|j| m.column(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = 1e-12 * scale;

    let mut a = m.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut r_diag = Vec::with_capacity(n);
    for j in 0..n {
        let x: Vec<f64> = (j..rows).map(|i| a[(i, j)]).collect();
        let norm = dot(&x, &x).sqrt();
        if norm <= tol || norm == 0.0 {
            return Err(Error::Degenerate(format!(
                "column {j} is (numerically) dependent on earlier columns"
            )));
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut vh = x;
        vh[0] -= alpha;
        let vnorm = dot(&vh, &vh).sqrt();
        if vnorm > 0.0 {
            for e in vh.iter_mut() {
                *e /= vnorm;
            }
        }
        for c in j..n {
            let proj: f64 = (j..rows).map(|i| vh[i - j] * a[(i, c)]).sum();
            for i in j..rows {
                a[(i, c)] -= 2.0 * vh[i - j] * proj;
            }
        }
        r_diag.push(alpha);
        reflectors.push(vh);
    }

    let mut q = Matrix::from_fn(rows, n, |i, j| if i == j { 1.0 } else { 0.0 });
    for (j, vh) in reflectors.iter().enumerate().rev() {
        for c in 0..n {
            let proj: f64 = (j..rows).map(|i| vh[i - j] * q[(i, c)]).sum();
            for i in j..rows {
                q[(i, c)] -= 2.0 * vh[i - j] * proj;
            }
        }
    }
    for (j, &rjj) in r_diag.iter().enumerate() {
        if rjj < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted descending;
/// eigenvectors are the columns of the returned matrix.
pub fn symmetric_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if n == 0 || m.cols() != n {
        return invalid("symmetric_eigen needs a non-empty square matrix");
    }
    if !m.is_finite() {
        return invalid("symmetric_eigen input has non-finite entries");
    }
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);
    if m.sub(&m.transpose()).frobenius_norm() > 1e-10 * scale {
        return invalid("matrix is not symmetric");
    }
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off <= (1e-15 * scale).powi(2) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Symmetric PSD square root `H^{1/2}`. Rejects matrices with an eigenvalue
/// below `-1e-10 · max|λ|`.
pub fn psd_sqrt(h: &Matrix) -> Result<Matrix> {
    let (values, vecs) = symmetric_eigen(h)?;
    let top = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if values.iter().any(|&l| l < -1e-10 * top) {
        return invalid("matrix is not positive semi-definite");
    }
    let n = h.rows();
    let roots: Vec<f64> = values.iter().map(|l| l.max(0.0).sqrt()).collect();
    Ok(Matrix::from_fn(n, n, |i, j| {
        (0..n).map(|k| vecs[(i, k)] * roots[k] * vecs[(j, k)]).sum()
    }))
}

/// Solves `a · x = b` by LU with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n || b.rows() != n {
        return invalid(format!(
            "solve shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let scale = a.as_slice().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut lu = a.clone();
    let mut x = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .unwrap_or(col);
        if lu[(pivot, col)].abs() <= 1e-13 * scale || scale == 0.0 {
            return Err(Error::Degenerate("singular linear system".into()));
        }
        if pivot != col {
            for c in 0..n {
                let tmp = lu[(col, c)];
                lu[(col, c)] = lu[(pivot, c)];
                lu[(pivot, c)] = tmp;
            }
            for c in 0..x.cols() {
                let tmp = x[(col, c)];
                x[(col, c)] = x[(pivot, c)];
                x[(pivot, c)] = tmp;
            }
        }
        for r in (col + 1)..n {
            let f = lu[(r, col)] / lu[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                lu[(r, c)] -= f * lu[(col, c)];
            }
            for c in 0..x.cols() {
                x[(r, c)] -= f * x[(col, c)];
            }
        }
    }
    for c in 0..x.cols() {
        for r in (0..n).rev() {
            let mut acc = x[(r, c)];
            for k in (r + 1)..n {
                acc -= lu[(r, k)] * x[(k, c)];
            }
            x[(r, c)] = acc / lu[(r, r)];
        }
    }
    Ok(x)
}

pub fn inverse(a: &Matrix) -> Result<Matrix> {
    solve(a, &Matrix::identity(a.rows()))
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// Largest singular value.
pub fn operator_norm(m: &Matrix) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Ok(0.0);
    }
    Ok(svd(m)?.s[0])
}
