//! Small dense linear algebra on `Vec<Vec<f64>>` row-major matrices.

use crate::error::{Error, Result};

pub type Matrix = Vec<Vec<f64>>;

pub fn transpose(a: &Matrix) -> Matrix {
    if a.is_empty() {
        return Vec::new();
    }
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; n]; m];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i][p];
            for j in 0..n {
                c[i][j] += aip * b[p][j];
            }
        }
    }
    c
}

pub fn matvec(a: &Matrix, x: &[f64]) -> Vec<f64> {
    a.iter().map(|r| dot(r, x)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn frobenius(a: &Matrix) -> f64 {
    a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// `A·Aᵀ`.
pub fn gram_outer(a: &Matrix) -> Matrix {
    let m = a.len();
    let mut g = vec![vec![0.0; m]; m];
    for i in 0..m {
        for j in 0..=i {
            let v = dot(&a[i], &a[j]);
            g[i][j] = v;
            g[j][i] = v;
        }
    }
    g
}

fn lu_in_place(a: &mut Matrix) -> Option<(Vec<usize>, f64)> {
    let n = a.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut sign = 1.0;
    for k in 0..n {
        let p = (k..n).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[p][k] == 0.0 {
            return None;
        }
        if p != k {
            a.swap(p, k);
            perm.swap(p, k);
            sign = -sign;
        }
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            a[i][k] = f;
            for j in k + 1..n {
                a[i][j] -= f * a[k][j];
            }
        }
    }
    Some((perm, sign))
}

/// Determinant by LU decomposition with partial pivoting.
pub fn determinant(a: &Matrix) -> f64 {
    let mut lu = a.clone();
    match lu_in_place(&mut lu) {
        Some((_, sign)) => (0..lu.len()).fold(sign, |acc, i| acc * lu[i][i]),
        None => 0.0,
    }
}

/// Solves `A x = b` for square nonsingular `A`.
pub fn solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.len();
    if b.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: b.len(),
        });
    }
    let mut lu = a.clone();
    let (perm, _) = lu_in_place(&mut lu).ok_or_else(|| Error::Domain {
        op: "solve",
        detail: "singular matrix".into(),
    })?;
    let mut y: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for j in 0..i {
            y[i] -= lu[i][j] * y[j];
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            y[i] -= lu[i][j] * y[j];
        }
        y[i] /= lu[i][i];
    }
    Ok(y)
}

/// Singular value decomposition `A = U Σ Vᵀ` of an `m × n` matrix.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `m` orthonormal left singular vectors (columns of `U`), stored as rows
    /// of this vector for convenience.
    pub u: Vec<Vec<f64>>,
    /// `min(m, n)` singular values in descending order.
    pub sigma: Vec<f64>,
    /// `n` right singular vectors.
    pub v: Vec<Vec<f64>>,
}

/// One-sided (Hestenes) Jacobi SVD. Columns are sorted by descending
/// singular value and each left vector's first nonzero component is made
/// nonnegative; `U` is completed to a full orthonormal basis.
pub fn svd(a: &Matrix) -> Svd {
    let m = a.len();
    let n = a[0].len();
    if m < n {
        let t = svd(&transpose(a));
        return Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
        .canonical();
    }
    // columns of A and V as vectors
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * x - s * y;
                    cols[q][i] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[p][i], v[q][i]);
                    v[p][i] = c * x - s * y;
                    v[q][i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    order.sort_by(|&i, &j| sig[j].total_cmp(&sig[i]));
    let sigma: Vec<f64> = order.iter().map(|&j| sig[j]).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        vs.push(v[j].clone());
        if sig[j] > smax * 1e-300 && sig[j] > 0.0 {
            u.push(cols[j].iter().map(|x| x / sig[j]).collect());
        } else {
            u.push(vec![0.0; m]);
        }
    }
    complete_basis(&mut u, m, &sigma);
    Svd { u, sigma, v: vs }.canonical()
}

/// Replaces zero columns (and appends missing ones) with orthonormal
/// complements using Gram–Schmidt against the standard basis.
fn complete_basis(u: &mut Vec<Vec<f64>>, m: usize, sigma: &[f64]) {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut missing = Vec::new();
    for (k, col) in u.iter().enumerate() {
        if sigma.get(k).copied().unwrap_or(0.0) > 0.0 {
            basis.push(col.clone());
        } else {
            missing.push(k);
        }
    }
    let mut extra: Vec<Vec<f64>> = Vec::new();
    for e in 0..m {
        if basis.len() + extra.len() >= m {
            break;
        }
        let mut w: Vec<f64> = (0..m).map(|i| if i == e { 1.0 } else { 0.0 }).collect();
        for _ in 0..2 {
            for b in basis.iter().chain(&extra) {
                let c = dot(&w, b);
                for i in 0..m {
                    w[i] -= c * b[i];
                }
            }
        }
        let nw = norm(&w);
        if nw > 1e-8 {
            extra.push(w.into_iter().map(|x| x / nw).collect());
        }
    }
    let mut it = extra.into_iter();
    for k in missing {
        u[k] = it.next().expect("enough complement vectors");
    }
    u.extend(it);
}

impl Svd {
    fn canonical(mut self) -> Self {
        for k in 0..self.u.len() {
            let first = self.u[k].iter().copied().find(|x| x.abs() > 1e-12);
            if first.is_some_and(|f| f < 0.0) {
                for x in &mut self.u[k] {
                    *x = -*x;
                }
                if k < self.v.len() && k < self.sigma.len() {
                    for x in &mut self.v[k] {
                        *x = -*x;
                    }
                }
            }
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn determinant_and_solve() {
        let a = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        assert!((determinant(&a) - 5.0).abs() < 1e-14);
        let x = solve(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-14 && (x[1] - 1.4).abs() < 1e-14);
        assert_eq!(determinant(&vec![vec![1.0, 2.0], vec![2.0, 4.0]]), 0.0);
        assert!(solve(&vec![vec![1.0, 2.0], vec![2.0, 4.0]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn svd_of_diagonal() {
        let a = vec![vec![1e-3, 0.0, 0.0], vec![0.0, 3.0, 0.0], vec![0.0, 0.0, 1e-3]];
        let s = svd(&a);
        assert!((s.sigma[0] - 3.0).abs() < 1e-15);
        assert_eq!(s.u[0], vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn svd_of_tall_and_wide() {
        let a = vec![vec![1.0], vec![2.0], vec![2.0]];
        let s = svd(&a);
        assert_eq!(s.sigma.len(), 1);
        assert!((s.sigma[0] - 3.0).abs() < 1e-14);
        assert_eq!(s.u.len(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let d = dot(&s.u[i], &s.u[j]);
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        let w = svd(&transpose(&a));
        assert!((w.sigma[0] - 3.0).abs() < 1e-14);
    }
}
