//! Singular values and numerical rank.
//!
//! Column-pivoted Householder QR reduces the matrix to its leading triangular
//! rows, then one-sided (Hestenes) Jacobi extracts the singular values of that
//! small factor. Pivoted QR stops once the untouched trailing block is
//! negligible against the rank threshold, which keeps low-rank layer deltas of
//! GPT-2 size cheap: the cost is O(rows · cols · rank) instead of cubic.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_RANK_TOL: f64 = 1e-6;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Trailing-block cutoff relative to the rank threshold. Truncating the QR
/// moves every singular value by at most the trailing Frobenius norm.
const TRUNCATION_MARGIN: f64 = 1e-3;

/// Number of singular values strictly above `rel_tol · σ_max`.
pub fn numerical_rank(m: &Matrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::Input(format!("rel_tol must lie in (0, 1), got {rel_tol}")));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    if m.is_zero() {
        return Ok(0);
    }
    let sv = leading_singular_values(m, Some(rel_tol))?;
    let smax = sv.first().copied().unwrap_or(0.0);
    Ok(sv.iter().filter(|&&s| s > rel_tol * smax).count())
}

/// All `min(rows, cols)` singular values, descending.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    if !m.is_finite() {
        return Err(Error::Numeric("matrix has non-finite entries".into()));
    }
    let mut sv = leading_singular_values(m, None)?;
    sv.resize(m.rows().min(m.cols()), 0.0);
    Ok(sv)
}

fn leading_singular_values(m: &Matrix, rel_tol: Option<f64>) -> Result<Vec<f64>> {
    let r = pivoted_qr_rows(m, rel_tol);
    if r.is_empty() {
        return Ok(Vec::new());
    }
    jacobi_singular_values(r)
}

/// Column-pivoted Householder QR. Returns the leading rows of R, one `Vec`
/// per row, each holding an entry for every column of `m`.
fn pivoted_qr_rows(m: &Matrix, rel_tol: Option<f64>) -> Vec<Vec<f64>> {
    let (rows, cols) = m.shape();
    let mut columns: Vec<Vec<f64>> = (0..cols).map(|j| m.column(j)).collect();
    let steps = rows.min(cols);

    let norms2: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();
    let total2: f64 = norms2.iter().sum();
    // σ_max ≥ max column norm, and σ_max ≥ ‖M‖_F / sqrt(min dim).
    let smax_lower = norms2
        .iter()
        .fold(0.0_f64, |a, &b| a.max(b))
        .sqrt()
        .max((total2 / steps as f64).sqrt());
    let cutoff = rel_tol.map(|t| TRUNCATION_MARGIN * t * smax_lower);

    let mut order: Vec<usize> = (0..cols).collect();
    let mut done = 0;
    for k in 0..steps {
        let remaining: Vec<f64> = order[k..]
            .iter()
            .map(|&j| dot(&columns[j][k..], &columns[j][k..]))
            .collect();
        let residual = remaining.iter().sum::<f64>().sqrt();
        if residual == 0.0 || cutoff.is_some_and(|c| residual <= c) {
            break;
        }
        let (best, _) = remaining
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        order.swap(k, k + best);

        let pivot = order[k];
        let x = &columns[pivot][k..];
        let alpha = -x[0].signum() * dot(x, x).sqrt();
        let alpha = if alpha == 0.0 { -dot(x, x).sqrt() } else { alpha };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm2 = dot(&v, &v);
        if vnorm2 > 0.0 {
            for &j in &order[k..] {
                let col = &mut columns[j][k..];
                let f = 2.0 * dot(&v, col) / vnorm2;
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= f * vi;
                }
            }
        }
        done = k + 1;
    }

    (0..done)
        .map(|i| order.iter().map(|&j| columns[j][i]).collect())
        .collect()
}

/// Hestenes one-sided Jacobi on the columns of Rᵀ. `r` holds k rows of length n;
/// each row becomes a column vector of Rᵀ, and after orthogonalization their
/// norms are the singular values.
fn jacobi_singular_values(mut vecs: Vec<Vec<f64>>) -> Result<Vec<f64>> {
    let k = vecs.len();
    let eps = f64::EPSILON;
    let mut converged = k < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..k {
            for q in p + 1..k {
                let alpha = dot(&vecs[p], &vecs[p]);
                let beta = dot(&vecs[q], &vecs[q]);
                let gamma = dot(&vecs[p], &vecs[q]);
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = vecs.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = c * a - s * b;
                    *y = s * a + c * b;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut sv: Vec<f64> = vecs.iter().map(|v| dot(v, v).sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{matmul, transpose};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn outer_product_has_rank_one() {
        let m = Matrix::outer(&[1.0, -2.0, 3.0], &[0.5, 4.0]).unwrap();
        assert_eq!(numerical_rank(&m, DEFAULT_RANK_TOL).unwrap(), 1);
    }

    #[test]
    fn identity_and_zero() {
        assert_eq!(numerical_rank(&Matrix::identity(4), DEFAULT_RANK_TOL).unwrap(), 4);
        assert_eq!(numerical_rank(&Matrix::zeros(5, 3), DEFAULT_RANK_TOL).unwrap(), 0);
    }

    #[test]
    fn rejects_bad_tolerance() {
        let m = Matrix::identity(2);
        assert!(numerical_rank(&m, 0.0).is_err());
        assert!(numerical_rank(&m, 1.0).is_err());
    }

    #[test]
    fn known_singular_values() {
        // diag(3, 2) rotated by orthogonal factors keeps singular values {3, 2}.
        let (c, s) = (0.6, 0.8);
        let u = Matrix::from_rows(&[[c, -s], [s, c]]);
        let d = Matrix::from_rows(&[[3.0, 0.0], [0.0, 2.0]]);
        let m = matmul(&matmul(&u, &d).unwrap(), &transpose(&u)).unwrap();
        let sv = singular_values(&m).unwrap();
        assert!((sv[0] - 3.0).abs() < 1e-12 && (sv[1] - 2.0).abs() < 1e-12, "{sv:?}");

        let rect = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, -5.0]]);
        let sv = singular_values(&rect).unwrap();
        assert_eq!(sv.len(), 2);
        assert!((sv[0] - 5.0).abs() < 1e-12 && (sv[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rank_four_delta_at_gpt2_shape() {
        let a = gaussian(4, 768, 1).scale(0.02);
        let b = gaussian(2304, 4, 2).scale(0.005);
        let delta = transpose(&matmul(&b, &a).unwrap()).scale(16.0);
        assert_eq!(numerical_rank(&delta, DEFAULT_RANK_TOL).unwrap(), 4);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues() {
        // σ² of M are the eigenvalues of MᵀM; the trace and Frobenius norm agree.
        let m = gaussian(9, 6, 3);
        let sv = singular_values(&m).unwrap();
        let sum_sq: f64 = sv.iter().map(|s| s * s).sum();
        let frob2: f64 = m.as_slice().iter().map(|x| x * x).sum();
        assert!((sum_sq - frob2).abs() < 1e-10 * frob2);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
    }

    proptest! {
        #[test]
        fn product_rank_bounded_by_inner_dim(seed in any::<u64>(), n in 1usize..24, m in 1usize..24, k in 1usize..8) {
            let a = gaussian(n, k, seed);
            let b = gaussian(k, m, seed ^ 0xabc);
            let p = matmul(&a, &b).unwrap();
            let rank = numerical_rank(&p, DEFAULT_RANK_TOL).unwrap();
            prop_assert!(rank <= k.min(n).min(m));
        }
    }
}
