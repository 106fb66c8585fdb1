//! Small dense linear algebra: one-sided Jacobi SVD.
//!
//! Desk-scale sizes only (matrices up to a few hundred on a side). Tolerance
//! 1e-12, sweep cap 100 * max(dim).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const JACOBI_TOL: f64 = 1e-12;

/// Thin SVD: `a = u * diag(s) * vt` with `u` m x k, `s` k, `vt` k x n,
/// k = min(m, n). Singular values are non-negative and non-increasing.
pub fn svd(a: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch { op: "svd", detail: format!("expected matrix, got {:?}", a.shape()) });
    }
    if !a.all_finite() {
        return Err(Error::NonFinite { op: "svd" });
    }
    let (m, n) = (a.shape()[0], a.shape()[1]);
    if m >= n {
        svd_tall(a)
    } else {
        let (u, s, vt) = svd_tall(&a.transposed()?)?;
        // a^T = u s vt  =>  a = v s u^T
        Ok((vt.transposed()?, s, u.transposed()?))
    }
}

/// One-sided Jacobi on a tall (m >= n) matrix: orthogonalize columns of a
/// working copy by plane rotations accumulated into V.
fn svd_tall(a: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    // column-major working copies for cache-friendly column ops
    let mut u: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a.at2(i, j)).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let max_sweeps = 100 * m.max(n);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..m {
                    app += u[p][i] * u[p][i];
                    aqq += u[q][i] * u[q][i];
                    apq += u[p][i] * u[q][i];
                }
                let denom = (app * aqq).sqrt();
                if denom > 0.0 {
                    off = off.max(apq.abs() / denom);
                }
                if apq.abs() <= JACOBI_TOL * denom || denom == 0.0 {
                    continue;
                }
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let up = u[p][i];
                    let uq = u[q][i];
                    u[p][i] = c * up - s * uq;
                    u[q][i] = s * up + c * uq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if off <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged && n > 1 {
        return Err(Error::SvdNoConvergence(max_sweeps));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = u.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut s = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        s.push(norms[j]);
        let col = if norms[j] > 0.0 {
            u[j].iter().map(|x| x / norms[j]).collect()
        } else {
            vec![0.0; m]
        };
        u_cols.push(col);
        v_cols.push(v[j].clone());
    }
    fill_null_columns(&mut u_cols, m);

    let mut u_t = Tensor::zeros(vec![m, n]);
    let mut vt_t = Tensor::zeros(vec![n, n]);
    for j in 0..n {
        for i in 0..m {
            u_t.set2(i, j, u_cols[j][i]);
        }
        for i in 0..n {
            vt_t.set2(j, i, v_cols[j][i]);
        }
    }
    Ok((u_t, s, vt_t))
}

/// Replace zero columns with unit vectors orthogonal to the rest so the
/// returned factor stays orthonormal even for rank-deficient input.
fn fill_null_columns(cols: &mut [Vec<f64>], m: usize) {
    for j in 0..cols.len() {
        let norm: f64 = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            continue;
        }
        'candidate: for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for other in cols.iter() {
                let dot: f64 = other.iter().zip(&cand).map(|(a, b)| a * b).sum();
                for (c, o) in cand.iter_mut().zip(other.iter()) {
                    *c -= dot * o;
                }
            }
            let n: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                for c in cand.iter_mut() {
                    *c /= n;
                }
                cols[j] = cand;
                break 'candidate;
            }
        }
    }
}

/// `m^{-1/2}` for a symmetric positive-definite matrix, via SVD.
pub fn sym_inv_sqrt(m: &Tensor) -> Result<Tensor> {
    let (u, s, _) = svd(m)?;
    let n = m.shape()[0];
    let mut d = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        if s[i] <= 0.0 {
            return Err(Error::Degenerate("non-positive eigenvalue in sym_inv_sqrt".into()));
        }
        d.set2(i, i, 1.0 / s[i].sqrt());
    }
    let ut = u.transposed()?;
    u.matmul(&d)?.matmul(&ut)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStream;
    use rand::Rng;

    fn reconstruct(u: &Tensor, s: &[f64], vt: &Tensor) -> Tensor {
        let k = s.len();
        let mut d = Tensor::zeros(vec![k, k]);
        for i in 0..k {
            d.set2(i, i, s[i]);
        }
        u.matmul(&d).unwrap().matmul(vt).unwrap()
    }

    fn check_orthonormal_cols(u: &Tensor, tol: f64) {
        let g = u.transposed().unwrap().matmul(u).unwrap();
        let n = g.shape()[0];
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((g.at2(i, j) - want).abs() < tol, "gram[{i}][{j}] = {}", g.at2(i, j));
            }
        }
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let (_, s, _) = svd(&Tensor::identity(3)).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_singular_value_matches_eig_oracle() {
        // A = u v^T with |u| = 2, |v| = 3: sigma = 6.
        let u = [2.0, 0.0, 0.0];
        let v = [0.0, 3.0, 0.0];
        let mut a = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            for j in 0..3 {
                a.set2(i, j, u[i] * v[j]);
            }
        }
        // oracle: power iteration on A^T A gives the top eigenvalue sigma^2
        let ata = a.transposed().unwrap().matmul(&a).unwrap();
        let mut x = vec![1.0, 1.0, 1.0];
        for _ in 0..200 {
            let y: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|j| ata.at2(i, j) * x[j]).sum())
                .collect();
            let n: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            x = y.iter().map(|a| a / n).collect();
        }
        let lambda: f64 = (0..3)
            .map(|i| x[i] * (0..3).map(|j| ata.at2(i, j) * x[j]).sum::<f64>())
            .sum();
        let (_, s, _) = svd(&a).unwrap();
        assert!((s[0] - lambda.sqrt()).abs() < 1e-10);
        assert!(s[1].abs() < 1e-10 && s[2].abs() < 1e-10);
    }

    #[test]
    fn random_rect_reconstruction_and_orthogonality() {
        let mut rng = SeedStream::new(11).rng();
        for &(m, n) in &[(5usize, 3usize), (3, 5), (6, 6), (4, 1)] {
            let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = Tensor::matrix(m, n, data).unwrap();
            let (u, s, vt) = svd(&a).unwrap();
            let r = reconstruct(&u, &s, &vt);
            assert!(a.max_abs_diff(&r) < 1e-10, "reconstruction {m}x{n}");
            check_orthonormal_cols(&u, 1e-10);
            check_orthonormal_cols(&vt.transposed().unwrap(), 1e-10);
            for w in s.windows(2) {
                assert!(w[0] >= w[1] - 1e-14);
            }
        }
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let a = Tensor::matrix(4, 3, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.0, 4.0, 4.0]).unwrap();
        let (u, s, vt) = svd(&a).unwrap();
        assert!(a.max_abs_diff(&reconstruct(&u, &s, &vt)) < 1e-10);
        check_orthonormal_cols(&u, 1e-9);
    }

    #[test]
    fn non_matrix_rejected() {
        assert!(svd(&Tensor::from_vec(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn inv_sqrt_inverts() {
        let m = Tensor::matrix(2, 2, vec![4.0, 1.0, 1.0, 3.0]).unwrap();
        let w = sym_inv_sqrt(&m).unwrap();
        let p = w.matmul(&m).unwrap().matmul(&w).unwrap();
        assert!(p.max_abs_diff(&Tensor::identity(2)) < 1e-10);
    }
}
