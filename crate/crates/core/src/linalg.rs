//! Small dense d×N matrices and the jump datum (λ, ν).
//!
//! Matrices here are at most a few entries wide (d, N ≤ 3 in practice), so a
//! flat row-major `Vec<f64>` is all we need.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the Euclidean norm of a unit normal.
pub const UNIT_TOL: f64 = 1e-12;

/// A real d×N matrix stored row-major.
///
/// Serialized as a list of rows, e.g. `[[1,0],[0,1]]`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
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
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Build from row-major data; fails on a length mismatch, an empty shape or
    /// non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("matrix must have positive dimensions".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                source_name: "matrix".into(),
                input: format!("{rows}x{cols} entries"),
                value: *v,
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Invalid("ragged matrix rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    /// 1×1 matrix.
    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// Diagonal square matrix.
    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// The dyad a ⊗ b.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj;
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }

    /// Frobenius norm |A|.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> Result<f64> {
        if self.rows != self.cols {
            return Err(Error::NotSquare {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok((0..self.rows).map(|i| self.get(i, i)).sum())
    }

    /// Frobenius inner product A : B.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// y += A x, without allocating.
    #[inline]
    pub fn mul_vec_add(&self, x: &[f64], y: &mut [f64]) {
        for (row, yi) in self.data.chunks(self.cols).zip(y.iter_mut()) {
            *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", self.cols),
                got: format!("{} rows", other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// Whether the columns form an orthonormal set to within `tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let Ok(p) = self.transpose().matmul(self) else {
            return false;
        };
        let id = Matrix::identity(self.rows);
        p.data.iter().zip(&id.data).all(|(a, b)| (a - b).abs() <= tol)
    }

    /// Checked entrywise difference.
    pub fn try_sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(self - other)
    }

    /// Checked entrywise sum.
    pub fn try_add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(self + other)
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_rows())
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.to_rows()
    }
}

impl<'a> Add<&'a Matrix> for &'a Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.shape(), rhs.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<'a> Sub<&'a Matrix> for &'a Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        debug_assert_eq!(self.shape(), rhs.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Matrix {
    type Output = Matrix;
    fn neg(self) -> Matrix {
        self.scale(-1.0)
    }
}

impl Mul<f64> for &Matrix {
    type Output = Matrix;
    fn mul(self, s: f64) -> Matrix {
        self.scale(s)
    }
}

/// Disarrangement tensor M = ∇g − G.
pub fn disarrangement_tensor(gradient: &Matrix, g: &Matrix) -> Result<Matrix> {
    gradient.try_sub(g)
}

/// A jump amplitude λ together with the unit normal ν of the jump set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpDatum {
    amplitude: Vec<f64>,
    normal: Vec<f64>,
}

impl JumpDatum {
    pub fn new(amplitude: Vec<f64>, normal: Vec<f64>) -> Result<Self> {
        check_unit(&normal)?;
        if amplitude.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("jump amplitude must be finite".into()));
        }
        Ok(JumpDatum { amplitude, normal })
    }

    pub fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    /// The dyad λ ⊗ ν.
    pub fn dyad(&self) -> Matrix {
        Matrix::outer(&self.amplitude, &self.normal)
    }
}

pub fn check_unit(v: &[f64]) -> Result<()> {
    let n = norm(v);
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit(n));
    }
    Ok(())
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Orthonormal N×N frame whose first column is `nu` (N ∈ {1, 2}).
pub fn frame_from_normal(nu: &[f64]) -> Result<Matrix> {
    check_unit(nu)?;
    match nu.len() {
        1 => Ok(Matrix::scalar(nu[0].signum())),
        2 => Matrix::from_rows(&[vec![nu[0], -nu[1]], vec![nu[1], nu[0]]]),
        n => Err(Error::Dimension(format!("normals in dimension {n} are not supported"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disarrangement_examples() {
        let id = Matrix::identity(2);
        assert_eq!(disarrangement_tensor(&id, &id).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(disarrangement_tensor(&id, &Matrix::zeros(2, 2)).unwrap(), id);
        let half = Matrix::diag(&[0.5, 0.5]);
        assert_eq!(disarrangement_tensor(&id, &half).unwrap(), half);
    }

    #[test]
    fn disarrangement_shape_mismatch() {
        let a = Matrix::zeros(2, 2);
        let b = Matrix::zeros(2, 1);
        assert!(matches!(
            disarrangement_tensor(&a, &b),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn trace_requires_square() {
        assert_eq!(Matrix::identity(3).trace().unwrap(), 3.0);
        assert!(matches!(
            Matrix::zeros(2, 3).trace(),
            Err(Error::NotSquare { rows: 2, cols: 3 })
        ));
    }

    #[test]
    fn rejects_non_finite_entries() {
        assert!(Matrix::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn jump_datum_requires_unit_normal() {
        assert!(JumpDatum::new(vec![1.0, 0.0], vec![1.0, 0.0]).is_ok());
        assert!(matches!(
            JumpDatum::new(vec![1.0, 0.0], vec![1.0, 1.0]),
            Err(Error::NotUnit(_))
        ));
        let j = JumpDatum::new(vec![2.0, 3.0], vec![0.0, 1.0]).unwrap();
        assert_eq!(j.dyad().to_rows(), vec![vec![0.0, 2.0], vec![0.0, 3.0]]);
    }

    #[test]
    fn frame_is_orthonormal_with_first_column_nu() {
        let s = 0.5f64.sqrt();
        let r = frame_from_normal(&[s, s]).unwrap();
        assert!(r.is_orthonormal(1e-12));
        assert_eq!(r.column(0), vec![s, s]);
    }

    #[test]
    fn serde_as_rows() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,4.0]]");
        let back: Matrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    proptest::proptest! {
        #[test]
        fn disarrangement_of_equal_args_vanishes(v in proptest::collection::vec(-1e3f64..1e3, 6)) {
            let a = Matrix::from_row_major(2, 3, v).unwrap();
            let m = disarrangement_tensor(&a, &a).unwrap();
            proptest::prop_assert_eq!(m.max_abs(), 0.0);
        }
    }
}
