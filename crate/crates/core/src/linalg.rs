//! Dense matrices, Gaussian moments and the symmetric eigensolver behind the
//! PSD square root.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!(
                "non-finite entry at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable row-major storage. Callers must keep entries finite.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows by hand.
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    /// Largest absolute difference between mirrored entries.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Replaces the matrix with `(A + Aᵀ) / 2`.
    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in i + 1..self.cols {
                let avg = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = avg;
                self[(j, i)] = avg;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Pairwise (cascade) summation, always splitting at the midpoint.
///
/// Only short odd-length runs are summed sequentially. Splitting even
/// lengths at `len / 2` means a vector made of two identical halves sums to
/// exactly twice the half, and swapping two equal-length halves leaves the sum
/// bit-identical. Cosine scores of concatenated embeddings rely on this.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if values.len() <= 1 || (values.len() <= LEAF && values.len() % 2 == 1) {
        let mut acc = 0.0;
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let (lo, hi) = values.split_at(values.len() / 2);
    pairwise_sum(lo) + pairwise_sum(hi)
}

/// Dot product with the same summation tree as [`pairwise_sum`].
pub fn pairwise_dot(a: &[f64], b: &[f64]) -> f64 {
    const LEAF: usize = 8;
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= 1 || (a.len() <= LEAF && a.len() % 2 == 1) {
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b) {
            acc += x * y;
        }
        return acc;
    }
    let mid = a.len() / 2;
    pairwise_dot(&a[..mid], &b[..mid]) + pairwise_dot(&a[mid..], &b[mid..])
}

/// Gaussian moments of a sample: mean vector and covariance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanCov {
    pub mean: Vec<f64>,
    pub cov: Matrix,
    pub n: usize,
}

impl MeanCov {
    pub fn new(mean: Vec<f64>, cov: Matrix, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Degenerate(format!(
                "moments need at least 2 samples, got {n}"
            )));
        }
        if !cov.is_square() || cov.rows() != mean.len() {
            return Err(Error::Shape(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite mean".into()));
        }
        let tol = SYM_TOL * cov.max_abs().max(1.0);
        if cov.asymmetry() > tol {
            return Err(Error::NotPsd(format!(
                "covariance asymmetry {:e}",
                cov.asymmetry()
            )));
        }
        Ok(MeanCov { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Column mean and unbiased (n − 1) covariance of the rows of `x`.
pub fn estimate_moments(x: &Matrix) -> Result<MeanCov> {
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "moments need at least 2 rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::Degenerate("moments need at least 1 column".into()));
    }
    let mut mean = vec![0.0; d];
    for row in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv_n);

    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.row_iter() {
        for ((c, v), m) in centered.iter_mut().zip(row).zip(&mean) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let cov_row = cov.row_mut(i);
            for j in i..d {
                cov_row[j] += ci * centered[j];
            }
        }
    }
    let inv_dof = 1.0 / (n - 1) as f64;
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] * inv_dof;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    if cov.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("covariance overflowed".into()));
    }
    MeanCov::new(mean, cov, n)
}

/// Symmetry tolerance, relative to `max(1, max |entry|)`.
pub const SYM_TOL: f64 = 1e-9;
/// Smallest admissible eigenvalue, relative to `max(1, max |eigenvalue|)`.
pub const PSD_TOL: f64 = 1e-9;

const JACOBI_REL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEig {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Sweeps over every off-diagonal pair until the off-diagonal Frobenius
/// norm falls below `1e-12 · ‖S‖_F`.
pub fn sym_eig(s: &Matrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let tol = SYM_TOL * s.max_abs().max(1.0);
    if s.asymmetry() > tol {
        return Err(Error::Invalid(format!(
            "matrix is not symmetric (asymmetry {:e})",
            s.asymmetry()
        )));
    }
    let n = s.rows();
    let mut a = s.clone();
    a.symmetrize();
    let mut v = Matrix::identity(n);
    let target = JACOBI_REL_TOL * a.frobenius_norm();

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(&a) <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }
    if !converged && off_diagonal_norm(&a) > target {
        return Err(Error::Numerical("Jacobi sweeps did not converge".into()));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                acc += a[(i, j)] * a[(i, j)];
            }
        }
    }
    acc.sqrt()
}

/// Applies the rotation that annihilates `a[p][q]`, accumulating it into `v`.
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
    let t = if theta.abs() > 1e150 {
        0.5 / theta
    } else {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows();

    // A ← A·J (columns p, q)
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    // A ← Jᵀ·A (rows p, q)
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Checks symmetry and eigenvalue floor, then returns the eigenpairs with
/// small negative eigenvalues clamped to zero.
fn psd_eig(s: &Matrix) -> Result<SymEig> {
    if !s.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    let tol = SYM_TOL * s.max_abs().max(1.0);
    if s.asymmetry() > tol {
        return Err(Error::NotPsd(format!(
            "asymmetry {:e} exceeds {:e}",
            s.asymmetry(),
            tol
        )));
    }
    let mut eig = sym_eig(s)?;
    let scale = eig.values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if let Some(&min) = eig.values.first() {
        if min < -PSD_TOL * scale {
            return Err(Error::NotPsd(format!("smallest eigenvalue {min:e}")));
        }
    }
    eig.values.iter_mut().for_each(|l| *l = l.max(0.0));
    Ok(eig)
}

/// Symmetric square root `R` of a PSD matrix, so that `R·R ≈ S`.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix> {
    let eig = psd_eig(s)?;
    let n = s.rows();
    let roots: Vec<f64> = eig.values.iter().map(|l| l.sqrt()).collect();
    let v = &eig.vectors;
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, root) in roots.iter().enumerate() {
                acc += v[(i, k)] * root * v[(j, k)];
            }
            r[(i, j)] = acc;
            r[(j, i)] = acc;
        }
    }
    Ok(r)
}

/// `Tr(S^{1/2})` for a PSD matrix.
pub fn psd_sqrt_trace(s: &Matrix) -> Result<f64> {
    let eig = psd_eig(s)?;
    Ok(eig.values.iter().map(|l| l.sqrt()).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn moments_two_points() {
        let x = Matrix::from_rows(&[[0.0, 0.0], [2.0, 2.0]]).unwrap();
        let m = estimate_moments(&x).unwrap();
        assert_eq!(m.mean, vec![1.0, 1.0]);
        assert_eq!(m.cov.as_slice(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn moments_constant_rows_have_zero_cov() {
        let x = Matrix::from_rows(&[[1.5, -2.0, 3.0]; 6]).unwrap();
        let m = estimate_moments(&x).unwrap();
        assert_eq!(m.mean, vec![1.5, -2.0, 3.0]);
        assert!(m.cov.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn moments_unbiased_1d() {
        let x = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let m = estimate_moments(&x).unwrap();
        assert_eq!(m.mean, vec![1.0]);
        assert_eq!(m.cov.as_slice(), &[1.0]);
    }

    #[test]
    fn moments_reject_single_row() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(estimate_moments(&x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sqrt_identity_and_diagonal() {
        let r = psd_sqrt(&Matrix::identity(3)).unwrap();
        assert_eq!(r, Matrix::identity(3));
        let r = psd_sqrt(&Matrix::from_diag(&[4.0, 9.0])).unwrap();
        assert_close(r[(0, 0)], 2.0, 1e-15);
        assert_close(r[(1, 1)], 3.0, 1e-15);
        assert_eq!(r[(0, 1)], 0.0);
    }

    #[test]
    fn sqrt_rejects_negative_and_asymmetric() {
        let neg = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(psd_sqrt(&neg), Err(Error::NotPsd(_))));
        let asym = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(psd_sqrt(&asym), Err(Error::NotPsd(_))));
    }

    #[test]
    fn sqrt_clamps_tiny_negative_eigenvalue() {
        let s = Matrix::from_diag(&[1.0, -1e-12]);
        let r = psd_sqrt(&s).unwrap();
        assert_eq!(r[(1, 1)], 0.0);
    }

    #[test]
    fn eig_small_cases() {
        let e = sym_eig(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![1.0, 3.0]);
        let e = sym_eig(&Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap()).unwrap();
        assert_close(e.values[0], -1.0, 1e-15);
        assert_close(e.values[1], 1.0, 1e-15);
        let e = sym_eig(&Matrix::identity(4)).unwrap();
        assert!(e.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn eig_rejects_non_square() {
        assert!(matches!(
            sym_eig(&Matrix::zeros(2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Matrix::from_vec(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![0.0]).is_err());
    }

    #[test]
    fn pairwise_sum_doubles_exactly() {
        let half: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut both = half.clone();
        both.extend_from_slice(&half);
        assert_eq!(pairwise_sum(&both), 2.0 * pairwise_sum(&half));
    }
}
