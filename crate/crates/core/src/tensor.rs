//! Dense row-major matrices and the handful of operations the toolkit needs.
//!
//! Entries are stored as `f64`. File payloads arrive as 32-bit floats and are
//! widened on load, so every accumulation below runs in double precision.
//! Frobenius sums additionally use a double-double accumulator so that the
//! result does not depend on traversal order (a matrix and its transpose have
//! bit-identical norms).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Matrix {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(5).copied().collect();
        f.debug_struct("Matrix")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .field("head", &preview)
            .finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "dimensions must be positive, got ({rows}, {cols})"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidMatrix(format!(
                "({rows}, {cols}) needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Result<Self> {
        Self::new(rows, cols, data.iter().map(|&x| f64::from(x)).collect())
    }

    /// Builds a matrix from nested rows; panics on ragged input. Intended for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::new(rows.len(), cols, data).expect("non-empty literal")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "zero-sized matrix");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Outer product `u vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Result<Self> {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Self::new(u.len(), v.len(), data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| c * x).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }
}

/// Standard product. The k-loop runs in ascending order for every output entry,
/// so repeated runs on the same platform are bit-identical.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, p) = (a.rows, b.cols);
    let mut out = vec![0.0; n * p];
    for (i, out_row) in out.chunks_exact_mut(p).enumerate() {
        let a_row = a.row(i);
        // Four k at a time, added left to right: the same rounding sequence as
        // one k per pass, with a quarter of the output traffic.
        let mut k = 0;
        while k + 4 <= a_row.len() {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let (b0, b1, b2, b3) = (b.row(k), b.row(k + 1), b.row(k + 2), b.row(k + 3));
            for j in 0..p {
                out_row[j] = out_row[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            k += 4;
        }
        for (kk, &aik) in a_row.iter().enumerate().skip(k) {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(kk)) {
                *o += aik * bkj;
            }
        }
    }
    Matrix::new(n, p, out)
}

pub fn transpose(m: &Matrix) -> Matrix {
    const BLOCK: usize = 32;
    let (r, c) = m.shape();
    let mut out = vec![0.0; r * c];
    for ib in (0..r).step_by(BLOCK) {
        for jb in (0..c).step_by(BLOCK) {
            for i in ib..(ib + BLOCK).min(r) {
                for j in jb..(jb + BLOCK).min(c) {
                    out[j * r + i] = m.data[i * c + j];
                }
            }
        }
    }
    Matrix {
        rows: c,
        cols: r,
        data: out,
    }
}

/// Double-double running sum (Knuth TwoSum). The final rounding is
/// effectively independent of the order in which terms arrive.
#[derive(Default, Clone, Copy)]
struct TwoSumAcc {
    hi: f64,
    lo: f64,
}

impl TwoSumAcc {
    #[inline]
    fn add(&mut self, x: f64) {
        let s = self.hi + x;
        let bp = s - self.hi;
        let err = (self.hi - (s - bp)) + (x - bp);
        self.hi = s;
        self.lo += err;
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Σ a_ij · b_ij over identically shaped matrices.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> Result<f64> {
    a.ensure_same_shape(b, "frobenius_inner")?;
    let mut acc = TwoSumAcc::default();
    for (x, y) in a.data.iter().zip(&b.data) {
        acc.add(x * y);
    }
    Ok(acc.value())
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    let mut acc = TwoSumAcc::default();
    for x in &m.data {
        acc.add(x * x);
    }
    acc.value().sqrt()
}

/// Entrywise `a + c·b`.
pub fn add_scaled(a: &Matrix, b: &Matrix, c: f64) -> Result<Matrix> {
    a.ensure_same_shape(b, "add_scaled")?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + c * y).collect();
    Ok(Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        out
    }

    fn rel_frob_err(got: &[f64], want: &[f64]) -> f64 {
        let num: f64 = got.iter().zip(want).map(|(g, w)| (g - w).powi(2)).sum();
        let den: f64 = want.iter().map(|w| w * w).sum();
        (num / den).sqrt()
    }

    #[test]
    fn construction_checks_length() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(Matrix::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_dot() {
        let id = Matrix::identity(2);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        assert_eq!(matmul(&id, &b).unwrap(), b);

        let row = Matrix::from_rows(&[[1.0, 2.0]]);
        let col = Matrix::from_rows(&[[3.0], [4.0]]);
        assert_eq!(matmul(&row, &col).unwrap(), Matrix::from_rows(&[[11.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(4, 768, 1);
        let b = random(768, 4, 2);
        let got = matmul(&a, &b).unwrap();
        assert!(rel_frob_err(got.as_slice(), &naive_matmul(&a, &b)) < 1e-6);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&random(2, 3, 0), &random(2, 3, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
        assert!(matches!(err, Error::Shape { left: (2, 3), right: (2, 3), .. }));
    }

    #[test]
    fn matmul_is_bit_reproducible() {
        let a = random(17, 33, 5);
        let b = random(33, 9, 6);
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    #[test]
    fn transpose_small_and_large() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(transpose(&m), Matrix::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));

        let big = random(2304, 768, 3);
        let t = transpose(&big);
        assert_eq!(t.shape(), (768, 2304));
        assert_eq!(t.get(700, 2000), big.get(2000, 700));
        assert_eq!(transpose(&t), big);
    }

    #[test]
    fn inner_products() {
        let id = Matrix::identity(2);
        let swap = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(frobenius_inner(&id, &swap).unwrap(), 0.0);

        let a = random(4, 4, 10);
        let b = random(4, 4, 11);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                oracle += a.get(i, j) * b.get(i, j);
            }
        }
        assert!((frobenius_inner(&a, &b).unwrap() - oracle).abs() < 1e-9);
        assert!(frobenius_inner(&a, &random(4, 5, 0)).is_err());
    }

    #[test]
    fn norms() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 3)), 0.0);
        assert_eq!(frobenius_norm(&Matrix::from_rows(&[[3.0, 4.0]])), 5.0);
        let m = random(30, 20, 4);
        let n = frobenius_norm(&m);
        let inner = frobenius_inner(&m, &m).unwrap();
        assert!((n * n - inner).abs() <= 1e-6 * inner);
    }

    #[test]
    fn add_scaled_cases() {
        let m = random(5, 6, 7);
        let z = Matrix::zeros(5, 6);
        assert!(add_scaled(&m, &m, -1.0).unwrap().is_zero());
        assert_eq!(add_scaled(&m, &z, 1.0).unwrap(), m);

        let b = random(5, 6, 8);
        let half = add_scaled(&m, &b, 0.5).unwrap();
        for ((h, x), y) in half.as_slice().iter().zip(m.as_slice()).zip(b.as_slice()) {
            assert_eq!(*h, x + 0.5 * y);
        }
        assert!(add_scaled(&m, &random(6, 5, 0), 1.0).is_err());
    }

    #[test]
    fn flattening_order_is_irrelevant_for_frobenius_ops() {
        let a = random(13, 7, 20);
        let b = random(13, 7, 21);
        let row_major = frobenius_inner(&a, &b).unwrap();
        let col_major = frobenius_inner(&transpose(&a), &transpose(&b)).unwrap();
        assert_eq!(row_major, col_major);
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..8, k in 1usize..8, p in 1usize..8, q in 1usize..8) {
            let a = random(n, k, seed);
            let b = random(k, p, seed ^ 1);
            let c = random(p, q, seed ^ 2);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(rel_frob_err(left.as_slice(), right.as_slice()) < 1e-5);
        }

        #[test]
        fn inner_is_bilinear(seed in any::<u64>(), r in 1usize..10, c in 1usize..10) {
            let a = random(r, c, seed);
            let x = random(r, c, seed ^ 3);
            let y = random(r, c, seed ^ 4);
            let lhs = frobenius_inner(&a, &add_scaled(&x, &y, 1.0).unwrap()).unwrap();
            let rhs = frobenius_inner(&a, &x).unwrap() + frobenius_inner(&a, &y).unwrap();
            let scale = frobenius_norm(&a) * (frobenius_norm(&x) + frobenius_norm(&y));
            prop_assert!((lhs - rhs).abs() <= 1e-6 * scale.max(1e-300));
        }

        #[test]
        fn inner_is_symmetric(seed in any::<u64>(), r in 1usize..10, c in 1usize..10) {
            let a = random(r, c, seed);
            let b = random(r, c, seed ^ 9);
            prop_assert_eq!(frobenius_inner(&a, &b).unwrap(), frobenius_inner(&b, &a).unwrap());
        }

        #[test]
        fn transpose_preserves_norm(seed in any::<u64>(), r in 1usize..40, c in 1usize..40) {
            let m = random(r, c, seed);
            prop_assert_eq!(frobenius_norm(&m), frobenius_norm(&transpose(&m)));
            prop_assert_eq!(transpose(&transpose(&m)), m);
        }
    }
}
