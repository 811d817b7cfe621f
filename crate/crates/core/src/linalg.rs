//! Dense linear algebra for small symmetric positive-definite matrices.
//!
//! Everything here works on row-major `f64` storage. Matrices in this crate
//! are at most a few hundred rows, so there are no blocked kernels. The
//! module reports non-positive-definite inputs as errors and never adds
//! jitter itself; that policy belongs to the likelihood code.

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Argument("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    /// `v v'`.
    pub fn outer(v: &[f64]) -> Self {
        let n = v.len();
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = v[i] * v[j];
            }
        }
        m
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
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// `self += s * other`, elementwise.
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
    }

    /// Frobenius inner product `<self, other>`.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(x, y)| x * y).sum()
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        out
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self' * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Lower-triangular matrix stored packed, row-major over the lower triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    n: usize,
    packed: Vec<f64>,
}

/// Number of entries in the lower triangle of an `n x n` matrix.
#[inline]
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`tri_len`], if `len` is a triangular number.
pub fn tri_dim(len: usize) -> Option<usize> {
    let mut n = 0;
    while tri_len(n) < len {
        n += 1;
    }
    (tri_len(n) == len).then_some(n)
}

#[inline]
fn tri_idx(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

impl LowerTriangular {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            packed: vec![0.0; tri_len(n)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n);
        for i in 0..n {
            l.set(i, i, 1.0);
        }
        l
    }

    pub fn from_packed(packed: Vec<f64>) -> Result<Self> {
        let n = tri_dim(packed.len()).ok_or_else(|| {
            Error::Argument(format!(
                "packed length {} is not a triangular number",
                packed.len()
            ))
        })?;
        Ok(Self { n, packed })
    }

    /// Takes the lower triangle of a square matrix; the upper part is ignored.
    pub fn pack(m: &Matrix) -> Self {
        assert!(m.is_square());
        let n = m.rows();
        let mut l = Self::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                l.set(i, j, m.get(i, j));
            }
        }
        l
    }

    pub fn unpack(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in 0..=i {
                m.set(i, j, self.get(i, j));
            }
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    #[inline]
    pub fn packed_mut(&mut self) -> &mut [f64] {
        &mut self.packed
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.packed[tri_idx(i, j)]
        }
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.packed[tri_idx(i, j)] = v;
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// `L L'` as a dense symmetric matrix.
    pub fn outer(&self) -> Matrix {
        let n = self.n;
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let ri = &self.packed[tri_idx(i, 0)..=tri_idx(i, j.min(i))];
                let rj = &self.packed[tri_idx(j, 0)..=tri_idx(j, j)];
                let s: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                m.set(i, j, s);
                m.set(j, i, s);
            }
        }
        m
    }

    /// Solves `L x = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in 0..n {
            let row = &self.packed[tri_idx(i, 0)..tri_idx(i, i)];
            let s: f64 = row.iter().zip(&x[..i]).map(|(l, xv)| l * xv).sum();
            x[i] = (x[i] - s) / self.packed[tri_idx(i, i)];
        }
        x
    }

    /// Solves `L' x = b` by back substitution.
    pub fn solve_upper(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = b.to_vec();
        for i in (0..n).rev() {
            let mut s = x[i];
            for k in i + 1..n {
                s -= self.packed[tri_idx(k, i)] * x[k];
            }
            x[i] = s / self.packed[tri_idx(i, i)];
        }
        x
    }

    /// Solves `(L L') x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `(L L')^{-1}`, for gradient code that needs the full inverse.
    pub fn inverse_of_outer(&self) -> Matrix {
        let n = self.n;
        // columns of L^{-1}
        let mut linv = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            let col = self.solve_lower(&e);
            for i in 0..n {
                linv.set(i, j, col[i]);
            }
        }
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i.max(j)..n {
                    s += linv.get(k, i) * linv.get(k, j);
                }
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }

    /// `2 * sum(ln L_ii)`, the log-determinant of `L L'`.
    pub fn logdet_of_outer(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.get(i, i).ln()).sum::<f64>()
    }
}

/// Symmetric positive-definite matrix with a cached Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    values: Matrix,
    chol: LowerTriangular,
}

impl SpdMatrix {
    /// Validates symmetry (within 1e-12 relative to the largest entry) and
    /// positive definiteness, caching the factor.
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_square() {
            return Err(Error::Argument("covariance matrix must be square".into()));
        }
        let scale = values.as_slice().iter().fold(1.0f64, |m, x| m.max(x.abs()));
        if values.max_asymmetry() > 1e-12 * scale {
            return Err(Error::Argument("matrix is not symmetric".into()));
        }
        let chol = cholesky(&values)?;
        Ok(Self { values, chol })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: Matrix::identity(n),
            chol: LowerTriangular::identity(n),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn values(&self) -> &Matrix {
        &self.values
    }

    #[inline]
    pub fn chol(&self) -> &LowerTriangular {
        &self.chol
    }

    pub fn into_matrix(self) -> Matrix {
        self.values
    }
}

/// Cholesky factor `L` with `L L' = m`.
///
/// Only the lower triangle of `m` is read. Fails at the first pivot that is
/// not strictly positive (or not finite).
pub fn cholesky(m: &Matrix) -> Result<LowerTriangular> {
    if !m.is_square() {
        return Err(Error::Argument("cholesky needs a square matrix".into()));
    }
    let n = m.rows();
    let mut l = LowerTriangular::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            let ri = tri_idx(i, 0);
            let rj = tri_idx(j, 0);
            for k in 0..j {
                s -= l.packed[ri + k] * l.packed[rj + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: i, value: s });
                }
                l.packed[ri + i] = s.sqrt();
            } else {
                l.packed[ri + j] = s / l.packed[rj + j];
            }
        }
    }
    Ok(l)
}

/// `(ln|m|, r' m^{-1} r)` from the cached factor, without forming the inverse.
pub fn logdet_and_quadform(m: &SpdMatrix, r: &[f64]) -> Result<(f64, f64)> {
    if r.len() != m.dim() {
        return Err(Error::Argument(format!(
            "vector length {} does not match dimension {}",
            r.len(),
            m.dim()
        )));
    }
    Ok(factor_logdet_quadform(m.chol(), r))
}

pub(crate) fn factor_logdet_quadform(l: &LowerTriangular, r: &[f64]) -> (f64, f64) {
    let y = l.solve_lower(r);
    (l.logdet_of_outer(), y.iter().map(|v| v * v).sum())
}

/// Frobenius norm.
pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// The matrix norm used for every boundedness check in the crate.
///
/// This is the Frobenius norm, which dominates the spectral norm.
pub fn spectral_norm_upper_bound(m: &SpdMatrix) -> f64 {
    frobenius_norm(m.values())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&Matrix::identity(3)).unwrap();
        assert_eq!(l, LowerTriangular::identity(3));
    }

    #[test]
    fn cholesky_two_by_two() {
        let l = cholesky(&m(&[&[4.0, 2.0], &[2.0, 5.0]])).unwrap();
        assert_eq!(l.packed(), &[2.0, 1.0, 2.0]);
        assert_eq!(l.outer(), m(&[&[4.0, 2.0], &[2.0, 5.0]]));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        match cholesky(&m(&[&[1.0, 2.0], &[2.0, 1.0]])) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 1),
            other => panic!("expected decomposition error, got {other:?}"),
        }
    }

    #[test]
    fn logdet_quadform_examples() {
        let id = SpdMatrix::identity(2);
        assert_eq!(logdet_and_quadform(&id, &[1.0, 1.0]).unwrap(), (0.0, 2.0));

        let d = SpdMatrix::new(Matrix::from_diag(&[4.0, 9.0])).unwrap();
        let (ld, q) = logdet_and_quadform(&d, &[2.0, 3.0]).unwrap();
        assert!((ld - 36f64.ln()).abs() < 1e-14);
        assert!((q - 2.0).abs() < 1e-14);

        let s = SpdMatrix::new(m(&[&[4.0, 2.0], &[2.0, 5.0]])).unwrap();
        let (ld, q) = logdet_and_quadform(&s, &[0.0, 0.0]).unwrap();
        assert!((ld - 16f64.ln()).abs() < 1e-14);
        assert_eq!(q, 0.0);
    }

    #[test]
    fn norm_examples() {
        assert!((spectral_norm_upper_bound(&SpdMatrix::identity(3)) - 3f64.sqrt()).abs() < 1e-15);
        let d = SpdMatrix::new(Matrix::from_diag(&[3.0, 4.0])).unwrap();
        assert_eq!(spectral_norm_upper_bound(&d), 5.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(2, 2)), 0.0);
    }

    #[test]
    fn tri_dims() {
        assert_eq!(tri_dim(0), Some(0));
        assert_eq!(tri_dim(1), Some(1));
        assert_eq!(tri_dim(6), Some(3));
        assert_eq!(tri_dim(7), None);
        assert!(LowerTriangular::from_packed(vec![0.0; 4]).is_err());
    }

    #[test]
    fn inverse_and_solve_agree() {
        let a = m(&[&[4.0, 1.0, 0.5], &[1.0, 3.0, 0.2], &[0.5, 0.2, 2.0]]);
        let l = cholesky(&a).unwrap();
        let inv = l.inverse_of_outer();
        let prod = a.matmul(&inv);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((prod.get(i, j) - e).abs() < 1e-12);
            }
        }
        let x = l.solve(&[1.0, 2.0, 3.0]);
        let back = a.matvec(&x);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0]) {
            assert!((b - e).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_rejects_asymmetric() {
        assert!(SpdMatrix::new(m(&[&[1.0, 0.1], &[0.0, 1.0]])).is_err());
    }
}
