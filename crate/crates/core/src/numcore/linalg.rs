//! Small dense linear algebra, generic over [`Real`] so it can run on the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ad::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    /// `pivot` is 1-based: the first diagonal position where elimination failed.
    #[error("matrix is not positive definite (pivot {pivot}, value {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat<R> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<R>,
}

impl<R: Real> Mat<R> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![R::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = R::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<R>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn diag(d: &[R]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> R {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: R) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[R] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        Mat::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    /// y = A x
    pub fn matvec(&self, x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// y = Aᵀ x
    pub fn matvec_t(&self, x: &[R]) -> Vec<R> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![R::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (yj, &a) in y.iter_mut().zip(self.row(i)) {
                *yj += a * xi;
            }
        }
        y
    }

    pub fn matmul(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                let orow = other.row(k);
                let base = i * other.cols;
                for j in 0..other.cols {
                    out.data[base + j] += a * orow[j];
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat<R>) -> Mat<R> {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: R) -> Mat<R> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| a * s).collect(),
        }
    }

    /// (A + Aᵀ) / 2
    pub fn symmetrize(&self) -> Mat<R> {
        Mat::from_fn(self.rows, self.cols, |i, j| (self.at(i, j) + self.at(j, i)) * 0.5)
    }

    pub fn trace(&self) -> R {
        (0..self.rows.min(self.cols)).fold(R::zero(), |acc, i| acc + self.at(i, i))
    }

    pub fn to_f64(&self) -> Mat<f64> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.value()).collect(),
        }
    }

    pub fn map<S>(&self, f: impl FnMut(&R) -> S) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

#[inline]
pub fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    debug_assert_eq!(a.len(), b.len());
    let mut s = R::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn sum<R: Real>(a: &[R]) -> R {
    a.iter().fold(R::zero(), |acc, &v| acc + v)
}

pub fn sq_norm<R: Real>(a: &[R]) -> R {
    dot(a, a)
}

pub fn axpy<R: Real>(alpha: R, x: &[R], y: &[R]) -> Vec<R> {
    x.iter().zip(y).map(|(&xi, &yi)| alpha * xi + yi).collect()
}

pub fn vsub<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn vadd<R: Real>(a: &[R], b: &[R]) -> Vec<R> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn to_f64<R: Real>(a: &[R]) -> Vec<f64> {
    a.iter().map(|v| v.value()).collect()
}

pub fn lift<R: Real>(a: &[f64]) -> Vec<R> {
    a.iter().map(|&v| R::cst(v)).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Lower-triangular Cholesky factor L with L Lᵀ = A. Only the lower triangle of `a` is read.
pub fn cholesky<R: Real>(a: &Mat<R>) -> Result<Mat<R>, LinalgError> {
    if a.rows != a.cols {
        return Err(LinalgError::DimensionMismatch {
            expected: a.rows,
            got: a.cols,
        });
    }
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a.at(j, j);
        for k in 0..j {
            let v = l.at(j, k);
            d -= v * v;
        }
        if !(d.value() > 0.0) || !d.value().is_finite() {
            return Err(LinalgError::NotPositiveDefinite {
                pivot: j + 1,
                value: d.value(),
            });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in (j + 1)..n {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            l.set(i, j, s / djj);
        }
    }
    Ok(l)
}

/// Solves L x = b for lower-triangular L.
pub fn solve_lower<R: Real>(l: &Mat<R>, b: &[R]) -> Vec<R> {
    let n = l.rows;
    let mut x: Vec<R> = Vec::with_capacity(n);
    for i in 0..n {
        let row = l.row(i);
        let mut s = b[i];
        for k in 0..i {
            s -= row[k] * x[k];
        }
        x.push(s / row[i]);
    }
    x
}

/// Solves Lᵀ x = b for lower-triangular L.
pub fn solve_lower_t<R: Real>(l: &Mat<R>, b: &[R]) -> Vec<R> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l.at(k, i) * x[k];
        }
        x[i] = s / l.at(i, i);
    }
    x
}

/// Solves A x = b given the Cholesky factor of A.
pub fn chol_solve<R: Real>(l: &Mat<R>, b: &[R]) -> Vec<R> {
    solve_lower_t(l, &solve_lower(l, b))
}

/// log |A| given the Cholesky factor of A.
pub fn chol_logdet<R: Real>(l: &Mat<R>) -> R {
    (0..l.rows).fold(R::zero(), |acc, i| acc + l.at(i, i).ln()) * 2.0
}

/// A⁻¹ given the Cholesky factor of A.
pub fn chol_inverse<R: Real>(l: &Mat<R>) -> Mat<R> {
    let n = l.rows;
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![R::zero(); n];
        e[j] = R::one();
        let col = chol_solve(l, &e);
        for i in 0..n {
            inv.set(i, j, col[i]);
        }
    }
    inv
}

/// Solves L X = B column by column (B given as a matrix).
pub fn solve_lower_mat<R: Real>(l: &Mat<R>, b: &Mat<R>) -> Mat<R> {
    let mut out = Mat::zeros(b.rows, b.cols);
    for j in 0..b.cols {
        let col: Vec<R> = (0..b.rows).map(|i| b.at(i, j)).collect();
        let x = solve_lower(l, &col);
        for i in 0..b.rows {
            out.set(i, j, x[i]);
        }
    }
    out
}
