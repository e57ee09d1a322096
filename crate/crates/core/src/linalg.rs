//! Dense full SVD by one-sided Jacobi rotations.
//!
//! Both factors are returned square and orthonormal; directions belonging to
//! zero singular values are completed by Gram-Schmidt against the standard
//! basis so that rank-deficient inputs still get a full basis.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// `a = u * diag(s) * vt` with `s` of length `min(m, n)`, sorted descending.
#[derive(Clone, Debug)]
pub struct FullSvd {
    pub u: Array2<f64>,
    pub s: Vec<f64>,
    pub vt: Array2<f64>,
}

pub fn svd_full(a: &Array2<f64>) -> Result<FullSvd> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(
            "svd input contains non-finite entries".into(),
        ));
    }
    let (m, n) = a.dim();
    if m >= n {
        let (u, s, v) = jacobi_tall(a);
        Ok(FullSvd {
            u,
            s,
            vt: v.reversed_axes(),
        })
    } else {
        // a^T = U' S V'^T  =>  a = V' S U'^T
        let (u_t, s, v_t) = jacobi_tall(&a.t().to_owned());
        Ok(FullSvd {
            u: v_t,
            s,
            vt: u_t.reversed_axes(),
        })
    }
}

/// SVD of an `m x n` matrix with `m >= n`. Returns `(U: m x m, s: n, V: n x n)`.
fn jacobi_tall(a: &Array2<f64>) -> (Array2<f64>, Vec<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    // Work on columns stored as rows for contiguous access.
    let mut w: Array2<f64> = a.t().to_owned();
    let mut v: Array2<f64> = Array2::eye(n);
    let eps = f64::EPSILON;

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let wp = w.row(p);
                    let wq = w.row(q);
                    (wp.dot(&wp), wq.dot(&wq), wp.dot(&wq))
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut w, p, q, c, s);
                rotate_rows(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let smax = norms.iter().copied().fold(0.0, f64::max);
    let tol = smax * eps * (m.max(n) as f64);

    let mut s = Vec::with_capacity(n);
    let mut v_sorted = Array2::<f64>::zeros((n, n));
    let mut u_cols: Vec<Array1<f64>> = Vec::with_capacity(m);
    for (k, &j) in order.iter().enumerate() {
        v_sorted.column_mut(k).assign(&v.row(j));
        if norms[j] > tol && norms[j] > 0.0 {
            s.push(norms[j]);
            u_cols.push(w.row(j).mapv(|x| x / norms[j]));
        } else {
            s.push(0.0);
        }
    }
    let u = complete_basis(u_cols, m);
    (u, s, v_sorted)
}

fn rotate_rows(x: &mut Array2<f64>, p: usize, q: usize, c: f64, s: f64) {
    let cols = x.ncols();
    for k in 0..cols {
        let xp = x[[p, k]];
        let xq = x[[q, k]];
        x[[p, k]] = c * xp - s * xq;
        x[[q, k]] = s * xp + c * xq;
    }
}

/// Extend orthonormal columns to a full `m x m` orthonormal matrix.
fn complete_basis(mut cols: Vec<Array1<f64>>, m: usize) -> Array2<f64> {
    let mut e = 0;
    while cols.len() < m && e < m {
        let mut cand = Array1::<f64>::zeros(m);
        cand[e] = 1.0;
        e += 1;
        // Two passes of classical Gram-Schmidt for stability.
        for _ in 0..2 {
            for c in &cols {
                let proj = c.dot(&cand);
                cand.scaled_add(-proj, c);
            }
        }
        let norm = cand.dot(&cand).sqrt();
        if norm > 1e-8 {
            cols.push(cand / norm);
        }
    }
    let mut u = Array2::<f64>::zeros((m, m));
    for (k, c) in cols.iter().enumerate() {
        u.column_mut(k).assign(c);
    }
    u
}

/// `u[:, :k] * diag(s) * vt[:k, :]`
pub fn reconstruct(svd: &FullSvd) -> Array2<f64> {
    let k = svd.s.len();
    let mut us = svd.u.slice(s![.., ..k]).to_owned();
    for (j, &sv) in svd.s.iter().enumerate() {
        us.column_mut(j).mapv_inplace(|x| x * sv);
    }
    us.dot(&svd.vt.slice(s![..k, ..]))
}

/// Largest absolute entry of `q q^T - I`.
pub fn orthonormality_error(q: &Array2<f64>) -> f64 {
    let g = q.dot(&q.t());
    let mut worst: f64 = 0.0;
    for ((i, j), &x) in g.indexed_iter() {
        let target = if i == j { 1.0 } else { 0.0 };
        worst = worst.max((x - target).abs());
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rectangular_example() {
        let svd = svd_full(&array![[3.0, 0.0], [4.0, 0.0]]).unwrap();
        assert!((svd.s[0] - 5.0).abs() < 1e-12);
        assert_eq!(svd.s[1], 0.0);
    }

    #[test]
    fn wide_and_tall_shapes() {
        let a = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.5]];
        for m in [a.clone(), a.t().to_owned()] {
            let svd = svd_full(&m).unwrap();
            assert_eq!(svd.u.dim(), (m.nrows(), m.nrows()));
            assert_eq!(svd.vt.dim(), (m.ncols(), m.ncols()));
            assert!(orthonormality_error(&svd.u) < 1e-12);
            assert!(orthonormality_error(&svd.vt) < 1e-12);
            let diff = (&reconstruct(&svd) - &m)
                .mapv(f64::abs)
                .fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_gets_full_basis() {
        let svd = svd_full(&Array2::zeros((3, 5))).unwrap();
        assert!(svd.s.iter().all(|&x| x == 0.0));
        assert!(orthonormality_error(&svd.u) < 1e-12);
        assert!(orthonormality_error(&svd.vt) < 1e-12);
    }

    #[test]
    fn rejects_nan() {
        assert!(svd_full(&array![[f64::NAN]]).is_err());
    }
}
