//! Dense matrix/tensor arithmetic and the truncated SVD primitive.
//!
//! Weight matrices here are small on one side (a handful of rows, many
//! columns), so the SVD goes through a Jacobi eigendecomposition of the
//! small-side Gram matrix rather than an iterative method.

use rayon::prelude::*;

use crate::error::{ensure, Result};

/// Row count below which matmul stays single-threaded.
const MATMUL_PAR_THRESHOLD: usize = 64;

/// Relative cutoff under which singular values are treated as zero.
const SV_RANK_CUTOFF: f64 = 1e-10;

/// Dense row-major matrix of 64-bit reals. Entries are finite by
/// construction; operations never mutate their inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "matrix entries must be finite"
        );
        Ok(Self { rows, cols, data })
    }

    /// Build from computed data without the finiteness check; arithmetic
    /// results (which may legitimately overflow) go through here.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "all rows must have equal length"
        );
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.rows == other.rows && self.cols == other.cols,
            "shape mismatch in sub: {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// Standard matrix product. Parallelizes over output rows for tall
    /// matrices; per-row arithmetic order is fixed, so the result does not
    /// depend on the thread schedule.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            "matmul dimension mismatch: {}x{} . {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let (n, inner, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * p];

        let compute_row = |i: usize, out_row: &mut [f64]| {
            for k in 0..inner {
                let a_ik = self.data[i * inner + k];
                if a_ik == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * p..(k + 1) * p];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a_ik * b;
                }
            }
        };

        if n >= MATMUL_PAR_THRESHOLD {
            out.par_chunks_mut(p)
                .enumerate()
                .for_each(|(i, row)| compute_row(i, row));
        } else {
            for (i, row) in out.chunks_mut(p).enumerate() {
                compute_row(i, row);
            }
        }
        Ok(Matrix {
            rows: n,
            cols: p,
            data: out,
        })
    }

    /// Sum of squared entries, `Tr(WᵀW)`.
    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Max absolute deviation of `selfᵀ·self` from the identity. Used to
    /// check orthonormality of column sets.
    pub fn orthonormality_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.cols {
            for b in a..self.cols {
                let mut dot = 0.0;
                for i in 0..self.rows {
                    dot += self.at(i, a) * self.at(i, b);
                }
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Orthonormalize the columns via modified Gram-Schmidt. Columns that
    /// become numerically zero are dropped.
    pub fn orthonormalized_columns(&self) -> Result<Matrix> {
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(self.cols);
        for j in 0..self.cols {
            let mut v = self.col(j);
            for u in &cols {
                let dot: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                for (vi, ui) in v.iter_mut().zip(u.iter()) {
                    *vi -= dot * ui;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                cols.push(v);
            }
        }
        ensure!(!cols.is_empty(), "no independent columns to orthonormalize");
        let r = cols.len();
        Ok(Matrix::from_fn(self.rows, r, |i, j| cols[j][i]))
    }
}

/// Raw convolutional layer weights: `s1 x s2` filters over `c` input
/// channels and `m` output channels. Layout is `[m][c][s1][s2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub s1: usize,
    pub s2: usize,
    pub c: usize,
    pub m: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn new(s1: usize, s2: usize, c: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == s1 * s2 * c * m,
            "tensor data length {} does not match {}x{}x{}x{}",
            data.len(),
            s1,
            s2,
            c,
            m
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "tensor entries must be finite"
        );
        Ok(Self { s1, s2, c, m, data })
    }

    pub fn zeros(s1: usize, s2: usize, c: usize, m: usize) -> Self {
        Self {
            s1,
            s2,
            c,
            m,
            data: vec![0.0; s1 * s2 * c * m],
        }
    }

    #[inline]
    pub fn idx(&self, i1: usize, i2: usize, ic: usize, im: usize) -> usize {
        ((im * self.c + ic) * self.s1 + i1) * self.s2 + i2
    }

    #[inline]
    pub fn at(&self, i1: usize, i2: usize, ic: usize, im: usize) -> f64 {
        self.data[self.idx(i1, i2, ic, im)]
    }

    #[inline]
    pub fn set(&mut self, i1: usize, i2: usize, ic: usize, im: usize, v: f64) {
        let idx = self.idx(i1, i2, ic, im);
        self.data[idx] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.s1, self.s2, self.c, self.m)
    }
}

/// Top right singular vectors of a matrix together with their singular
/// values (descending). `right_vectors` has orthonormal columns.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub singular_values: Vec<f64>,
    pub right_vectors: Matrix,
}

/// `W·Wᵀ` for a wide matrix; the small-side Gram matrix whose
/// eigendecomposition drives the truncated SVD. Output is exactly
/// symmetric (the upper triangle is mirrored).
pub fn gram_small_side(w: &Matrix) -> Result<Matrix> {
    ensure!(
        w.rows() <= w.cols(),
        "gram_small_side expects rows <= cols, got {}x{}",
        w.rows(),
        w.cols()
    );
    let s = w.rows();
    let mut g = Matrix::zeros(s, s);
    for i in 0..s {
        let ri = w.row(i);
        for j in i..s {
            let dot: f64 = ri.iter().zip(w.row(j)).map(|(a, b)| a * b).sum();
            g.set(i, j, dot);
            g.set(j, i, dot);
        }
    }
    Ok(g)
}

/// Eigendecomposition of a small symmetric matrix by cyclic Jacobi
/// rotations. Returns eigenvalues (descending) and the matching
/// orthonormal eigenvectors as columns.
pub fn jacobi_eigh(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure!(a.rows() == a.cols(), "jacobi_eigh needs a square matrix");
    let n = a.rows();
    let mut m = a.clone();
    let mut v = Matrix::identity(n);

    let off_sq = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += m.at(i, j) * m.at(i, j);
            }
        }
        s
    };
    let total = a.frobenius_sq().max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        if off_sq(&m) <= 1e-28 * total {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.at(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.at(p, p);
                let aqq = m.at(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of the working matrix.
                for k in 0..n {
                    let mkp = m.at(k, p);
                    let mkq = m.at(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.at(p, k);
                    let mqk = m.at(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.at(k, p);
                    let vkq = v.at(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m.at(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());

    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let sorted_vecs = Matrix::from_fn(n, n, |i, j| v.at(i, order[j]));
    Ok((sorted_vals, sorted_vecs))
}

/// Top-`k` right singular vectors of `w`, via eigendecomposition of the
/// Gram matrix on the smaller side. Singular values below
/// `1e-10 * sigma_max` are treated as zero and their vectors are not
/// synthesized, so the returned width is `min(k, numerical rank)`.
pub fn truncated_svd(w: &Matrix, k: usize) -> Result<SvdResult> {
    ensure!(k >= 1, "truncated_svd needs k >= 1");

    if w.rows() <= w.cols() {
        // Eigendecompose W·Wᵀ (rows x rows), then lift: v_i = Wᵀ u_i / σ_i.
        let g = gram_small_side(w)?;
        let (evals, u) = jacobi_eigh(&g)?;
        let sigma: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let sigma_max = sigma.first().copied().unwrap_or(0.0);
        let rank = sigma
            .iter()
            .take_while(|&&s| s > SV_RANK_CUTOFF * sigma_max && s > 0.0)
            .count();
        let r = k.min(rank);
        if r == 0 {
            return Ok(SvdResult {
                singular_values: vec![],
                right_vectors: Matrix::zeros(w.cols(), 0),
            });
        }
        let n = w.cols();
        let mut right = Matrix::zeros(n, r);
        for j in 0..r {
            let inv = 1.0 / sigma[j];
            for col in 0..n {
                let mut dot = 0.0;
                for i in 0..w.rows() {
                    dot += w.at(i, col) * u.at(i, j);
                }
                right.set(col, j, dot * inv);
            }
        }
        Ok(SvdResult {
            singular_values: sigma[..r].to_vec(),
            right_vectors: right,
        })
    } else {
        // Tall matrix: WᵀW is the small side and its eigenvectors already
        // are the right singular vectors.
        let g = w.transpose().matmul(w)?;
        let (evals, v) = jacobi_eigh(&g)?;
        let sigma: Vec<f64> = evals.iter().map(|&l| l.max(0.0).sqrt()).collect();
        let sigma_max = sigma.first().copied().unwrap_or(0.0);
        let rank = sigma
            .iter()
            .take_while(|&&s| s > SV_RANK_CUTOFF * sigma_max && s > 0.0)
            .count();
        let r = k.min(rank);
        let right = Matrix::from_fn(w.cols(), r, |i, j| v.at(i, j));
        Ok(SvdResult {
            singular_values: sigma[..r].to_vec(),
            right_vectors: right,
        })
    }
}

/// Free-function form of [`Matrix::frobenius_sq`].
pub fn frobenius_sq(w: &Matrix) -> f64 {
    w.frobenius_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::identity(2);
        let prod = i2.matmul(&i2).unwrap();
        assert_eq!(prod, i2);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.at(0, 0), 17.0);
        assert_eq!(c.at(1, 0), 39.0);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(a.matmul(&b), Err(Error::Contract(_))));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Tensor4::new(1, 1, 1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn gram_identity() {
        let i2 = Matrix::identity(2);
        assert_eq!(gram_small_side(&i2).unwrap(), i2);
    }

    #[test]
    fn gram_hand_example() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]).unwrap();
        let g = gram_small_side(&w).unwrap();
        assert_eq!(g.at(0, 0), 2.0);
        assert_eq!(g.at(0, 1), 0.0);
        assert_eq!(g.at(1, 0), 0.0);
        assert_eq!(g.at(1, 1), 4.0);
    }

    #[test]
    fn gram_symmetric_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random_matrix(&mut rng, 3, 10);
        let g = gram_small_side(&w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((g.at(i, j) - g.at(j, i)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Matrix::zeros(3, 4).frobenius_sq(), 0.0);
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(w.frobenius_sq(), 30.0);
        // Tr(WWᵀ) = Tr(WᵀW)
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_matrix(&mut rng, 3, 7);
        let g = gram_small_side(&w).unwrap();
        let trace: f64 = (0..3).map(|i| g.at(i, i)).sum();
        assert!((trace - w.frobenius_sq()).abs() < 1e-10);
    }

    #[test]
    fn jacobi_reconstructs_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2usize, 3, 5, 8] {
            let half = random_matrix(&mut rng, n, n);
            let a = {
                let t = half.transpose();
                let mut s = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        s.set(i, j, 0.5 * (half.at(i, j) + t.at(i, j)));
                    }
                }
                s
            };
            let (vals, vecs) = jacobi_eigh(&a).unwrap();
            assert!(vecs.orthonormality_defect() < 1e-10);
            // A v_j = λ_j v_j
            for j in 0..n {
                for i in 0..n {
                    let av: f64 = (0..n).map(|k| a.at(i, k) * vecs.at(k, j)).sum();
                    assert!((av - vals[j] * vecs.at(i, j)).abs() < 1e-9);
                }
            }
            // Sorted descending.
            for j in 1..n {
                assert!(vals[j - 1] >= vals[j] - 1e-12);
            }
        }
    }

    #[test]
    fn svd_diagonal_hand_example() {
        let w = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let svd = truncated_svd(&w, 1).unwrap();
        assert_eq!(svd.singular_values.len(), 1);
        assert!((svd.singular_values[0] - 3.0).abs() < 1e-12);
        // Right vector is ±e1.
        assert!((svd.right_vectors.at(0, 0).abs() - 1.0).abs() < 1e-10);
        assert!(svd.right_vectors.at(1, 0).abs() < 1e-10);
    }

    #[test]
    fn svd_equal_columns_rank_one() {
        let n = 6;
        let w = Matrix::from_fn(3, n, |i, _| (i + 1) as f64);
        let svd = truncated_svd(&w, 1).unwrap();
        assert_eq!(svd.singular_values.len(), 1);
        assert!((svd.singular_values[0] - w.frobenius_sq().sqrt()).abs() < 1e-10);
        let expect = 1.0 / (n as f64).sqrt();
        for j in 0..n {
            assert!((svd.right_vectors.at(j, 0).abs() - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn svd_energy_identity_and_orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(s, n) in &[(2usize, 5usize), (3, 8), (5, 30), (4, 4)] {
            let w = random_matrix(&mut rng, s, n);
            let svd = truncated_svd(&w, s).unwrap();
            let energy: f64 = svd.singular_values.iter().map(|v| v * v).sum();
            let rel = (energy - w.frobenius_sq()).abs() / w.frobenius_sq();
            assert!(rel < 1e-8, "energy identity failed: rel={rel}");
            assert!(svd.right_vectors.orthonormality_defect() < 1e-8);
            // Descending order.
            for j in 1..svd.singular_values.len() {
                assert!(svd.singular_values[j - 1] >= svd.singular_values[j]);
            }
        }
    }

    #[test]
    fn svd_tall_matrix_side() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_matrix(&mut rng, 10, 3);
        let svd = truncated_svd(&w, 3).unwrap();
        let energy: f64 = svd.singular_values.iter().map(|v| v * v).sum();
        assert!((energy - w.frobenius_sq()).abs() / w.frobenius_sq() < 1e-8);
        assert!(svd.right_vectors.orthonormality_defect() < 1e-8);
    }

    #[test]
    fn svd_rejects_k_zero() {
        let w = Matrix::identity(2);
        assert!(matches!(truncated_svd(&w, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn svd_zero_matrix_has_empty_result() {
        let w = Matrix::zeros(2, 4);
        let svd = truncated_svd(&w, 2).unwrap();
        assert!(svd.singular_values.is_empty());
        assert_eq!(svd.right_vectors.cols(), 0);
    }

    #[test]
    fn orthonormalize_random_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_matrix(&mut rng, 12, 4);
        let q = m.orthonormalized_columns().unwrap();
        assert_eq!(q.cols(), 4);
        assert!(q.orthonormality_defect() < 1e-10);
    }
}
