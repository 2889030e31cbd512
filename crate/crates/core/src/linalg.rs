//! Dense linear-algebra kernels.
//!
//! [`Matrix`] is a plain row-major `f64` matrix. The column-oriented helpers
//! (`dot`, `axpy`, [`orthonormalize_columns`]) work on `Vec<f64>` columns, which
//! is the layout the greedy engine keeps its residuals in.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default relative tolerance for rank decisions and dropped columns.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols.max(1),
                col: pos % cols.max(1),
            });
        }
        Ok(Self { rows, cols, data })
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

    /// Panics on ragged input; intended for literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    /// Builds a matrix from a list of equally long columns.
    pub fn from_columns(rows: usize, columns: &[Vec<f64>]) -> Self {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "column length mismatch");
            for (i, v) in col.iter().enumerate() {
                m.data[i * cols + j] = *v;
            }
        }
        m
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn columns(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::with_capacity(self.rows); self.cols];
        for i in 0..self.rows {
            for (j, col) in out.iter_mut().enumerate() {
                col.push(self.data[i * self.cols + j]);
            }
        }
        out
    }

    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (jj, &j) in idx.iter().enumerate() {
                m.data[i * idx.len() + jj] = self.get(i, j);
            }
        }
        m
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn scaled(&self, c: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "sub",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Standard product `a × b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Matrix {
        rows: n,
        cols: m,
        data: out,
    })
}

/// Sum of squared entries.
pub fn frob_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `y += alpha * x`
#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Thin orthonormal basis of a set of columns, with the triangular factor of the kept ones.
#[derive(Debug, Clone)]
pub struct ColumnBasis {
    /// Orthonormal columns, one per kept input column.
    pub q: Vec<Vec<f64>>,
    /// `r[t]` holds the coefficients of kept column `t` on `q[0..=t]`.
    pub r: Vec<Vec<f64>>,
    /// Indices (into the input) of the columns that produced a basis vector.
    pub kept: Vec<usize>,
}

impl ColumnBasis {
    pub fn rank(&self) -> usize {
        self.q.len()
    }

    /// Solves `R γ = c` for the upper-triangular factor (back substitution).
    pub fn solve_r(&self, c: &[f64]) -> Vec<f64> {
        let r = self.rank();
        let mut g = vec![0.0; r];
        for i in (0..r).rev() {
            let mut s = c[i];
            for (t, gt) in g.iter().enumerate().take(r).skip(i + 1) {
                s -= self.r[t][i] * gt;
            }
            g[i] = s / self.r[i][i];
        }
        g
    }
}

/// Modified Gram–Schmidt with one reorthogonalization pass.
///
/// Column `j` is dropped when its residual norm is at most `tol * ref_norms[j]`.
/// `ref_norms` lets callers measure dependence against some other scale than the
/// column's own norm (the greedy engine compares residuals to the original column).
pub fn orthonormalize_columns(cols: &[Vec<f64>], ref_norms: &[f64], tol: f64) -> ColumnBasis {
    let mut q: Vec<Vec<f64>> = Vec::new();
    let mut r = Vec::new();
    let mut kept = Vec::new();
    for (j, col) in cols.iter().enumerate() {
        let mut v = col.clone();
        let mut coeff = vec![0.0; q.len() + 1];
        for _pass in 0..2 {
            for (t, qt) in q.iter().enumerate() {
                let c = dot(qt, &v);
                coeff[t] += c;
                axpy(&mut v, -c, qt);
            }
        }
        let nrm = norm_sq(&v).sqrt();
        if nrm <= tol * ref_norms[j] || nrm == 0.0 {
            continue;
        }
        for x in v.iter_mut() {
            *x /= nrm;
        }
        let last = q.len();
        coeff[last] = nrm;
        q.push(v);
        r.push(coeff);
        kept.push(j);
    }
    ColumnBasis { q, r, kept }
}

/// Result of [`orthonormalize_with_tol`].
#[derive(Debug, Clone)]
pub struct Orthonormalized {
    /// `rows × rank` with orthonormal columns.
    pub basis: Matrix,
    /// `rank × kept.len()` upper-triangular; `cols[:, kept] = basis × coeffs`.
    pub coeffs: Matrix,
    pub kept: Vec<usize>,
}

/// Orthonormalizes the columns of `cols`, dropping those whose residual is at most
/// `tol` times their own norm.
pub fn orthonormalize_with_tol(cols: &Matrix, tol: f64) -> Result<Orthonormalized> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
    }
    let columns = cols.columns();
    let norms: Vec<f64> = columns.iter().map(|c| norm_sq(c).sqrt()).collect();
    let cb = orthonormalize_columns(&columns, &norms, tol);
    let rank = cb.rank();
    let basis = Matrix::from_columns(cols.rows(), &cb.q);
    let mut coeffs = Matrix::zeros(rank, rank);
    for (t, rc) in cb.r.iter().enumerate() {
        for (s, v) in rc.iter().enumerate() {
            coeffs.set(s, t, *v);
        }
    }
    Ok(Orthonormalized {
        basis,
        coeffs,
        kept: cb.kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub numerical_rank: usize,
    pub singular_tolerance: f64,
    pub column_count: usize,
}

/// Numerical rank by Gram–Schmidt with column pivoting (largest residual first).
pub fn numerical_rank(a: &Matrix, tol: f64) -> Result<RankReport> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::InvalidParameter(format!("tolerance must be > 0, got {tol}")));
    }
    let mut cols = a.columns();
    let norms: Vec<f64> = cols.iter().map(|c| norm_sq(c).sqrt()).collect();
    let mut active: Vec<usize> = (0..cols.len()).collect();
    let mut rank = 0;
    let max_rank = a.rows().min(a.cols());
    while rank < max_rank {
        active.retain(|&j| {
            let n = norm_sq(&cols[j]).sqrt();
            n > tol * norms[j] && n > 0.0
        });
        let Some(&pivot) = active
            .iter()
            .max_by(|&&x, &&y| norm_sq(&cols[x]).total_cmp(&norm_sq(&cols[y])).then(y.cmp(&x)))
        else {
            break;
        };
        let mut qv = cols[pivot].clone();
        let n = norm_sq(&qv).sqrt();
        for x in qv.iter_mut() {
            *x /= n;
        }
        active.retain(|&j| j != pivot);
        for &j in &active {
            for _pass in 0..2 {
                let c = dot(&qv, &cols[j]);
                axpy(&mut cols[j], -c, &qv);
            }
        }
        rank += 1;
    }
    Ok(RankReport {
        numerical_rank: rank,
        singular_tolerance: tol,
        column_count: a.cols(),
    })
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }
}
