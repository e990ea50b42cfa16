use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Builds a matrix from row-major values.
    pub fn from_row_major(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Structure(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Structure(format!(
                "non-finite entry at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Structure("ragged rows".into()));
        }
        Self::from_row_major(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "dimension mismatch in mul_vec");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "dimension mismatch in matmul");
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn scale(&mut self, factor: f64) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    /// Adds `factor * other` in place.
    pub fn axpy(&mut self, factor: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += factor * b;
        }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Symmetric within `rel_tol` relative to the largest absolute entry.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.values[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.values[i * self.cols + j]
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: DenseMatrix,
}

impl Cholesky {
    /// Factors a symmetric positive-definite matrix. Only the lower triangle is read.
    ///
    /// A pivot at or below `1e-12 * max(diag(A))` is reported as
    /// [`Error::NotPositiveDefinite`] with its index.
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        Self::factor_with_tolerance(a, 1e-12)
    }

    pub fn factor_with_tolerance(a: &DenseMatrix, rel_pivot_tol: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Structure(format!(
                "Cholesky needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let max_diag = (0..n).fold(0.0f64, |m, i| m.max(a[(i, i)]));
        let threshold = rel_pivot_tol * max_diag;
        let mut l = DenseMatrix::zeros(n, n);
        for j in 0..n {
            let lj = &l.values[j * n..j * n + j];
            let d = a[(j, j)] - dot(lj, lj);
            if !(d > threshold) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let (head, tail) = l.values.split_at_mut(i * n);
                let s = a[(i, j)] - dot(&tail[..j], &head[j * n..j * n + j]);
                tail[j] = s / djj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    pub fn lower(&self) -> &DenseMatrix {
        &self.lower
    }

    /// Solves `L y = b` in place.
    pub fn forward_substitute(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let row = &self.lower.values[i * n..i * n + i];
            b[i] = (b[i] - dot(row, &b[..i])) / self.lower.values[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn backward_substitute(&self, y: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower.values[k * n + i] * y[k];
            }
            y[i] = s / self.lower.values[i * n + i];
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.dim(), "dimension mismatch in Cholesky solve");
        self.forward_substitute(x);
        self.backward_substitute(x);
    }

    pub fn inverse(&self) -> DenseMatrix {
        let n = self.dim();
        let mut inv = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.solve_in_place(&mut e);
            for i in 0..n {
                inv[(i, j)] = e[i];
            }
        }
        // symmetrize away rounding
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = m;
                inv[(j, i)] = m;
            }
        }
        inv
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

/// Solves `A x = b` for symmetric positive-definite `A`.
///
/// `A` must be symmetric within `1e-10` relative to its largest entry.
pub fn cholesky_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if !a.is_square() || a.rows != b.len() {
        return Err(Error::Structure(format!(
            "cannot solve a {}x{} system with a right-hand side of length {}",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::Structure("matrix is not symmetric".into()));
    }
    Ok(Cholesky::factor(a)?.solve(b))
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    Ok(Cholesky::factor(a)?.inverse())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_solve_returns_rhs() {
        let x = cholesky_solve(&DenseMatrix::identity(3), &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn diagonal_solve() {
        let a = DenseMatrix::from_diagonal(&[2.0, 4.0]);
        let x = cholesky_solve(&a, &[2.0, 8.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn singular_reports_pivot() {
        let a = DenseMatrix::from_rows(&[
            vec![1.0, 1.0, 0.0],
            vec![1.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ])
        .unwrap();
        match Cholesky::factor(&a) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected pivot error, got {other:?}"),
        }
    }

    #[test]
    fn indefinite_rejected() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            cholesky_solve(&a, &[1.0, 1.0]),
            Err(Error::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn asymmetric_rejected() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky_solve(&a, &[1.0, 1.0]), Err(Error::Structure(_))));
    }

    #[test]
    fn non_finite_entries_rejected() {
        assert!(DenseMatrix::from_row_major(1, 2, vec![1.0, f64::NAN]).is_err());
    }

    #[test]
    fn log_det_and_inverse() {
        let a = DenseMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let c = Cholesky::factor(&a).unwrap();
        assert!((c.log_det() - 8.0f64.ln()).abs() < 1e-14);
        let inv = c.inverse();
        let prod = a.matmul(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod[(i, j)] - e).abs() < 1e-14);
            }
        }
    }
}
