//! Row-major dense matrices and a minimum-norm least-squares solver.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::NumericsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Dimension {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    /// Panics on ragged input; intended for literals and tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Mat {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn zip_with(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Inverse of a square matrix, `None` when singular.
    pub fn inverse(&self) -> Option<Mat> {
        assert!(self.is_square());
        let m = DMatrix::from_row_slice(self.rows, self.cols, &self.data);
        let inv = m.try_inverse()?;
        Some(Mat::from_fn(self.rows, self.cols, |i, j| inv[(i, j)]))
    }

    /// CSV with an optional header row.
    pub fn to_csv(&self, header: Option<&[String]>) -> String {
        let mut s = String::new();
        if let Some(h) = header {
            s.push_str(&h.join(","));
            s.push('\n');
        }
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v}")).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstsqFit {
    pub coef: Vec<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

/// Minimum-norm least-squares solution of `a x ≈ b` via SVD.
pub fn lstsq(a: &Mat, b: &[f64]) -> Result<LstsqFit, NumericsError> {
    if a.rows() != b.len() {
        return Err(NumericsError::Dimension {
            expected: a.rows(),
            got: b.len(),
        });
    }
    if a.cols() == 0 {
        return Ok(LstsqFit {
            coef: vec![],
            rank: 0,
            rank_deficient: false,
        });
    }
    let m = DMatrix::from_row_slice(a.rows(), a.cols(), a.data());
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let eps = smax * 1e-10 * a.rows().max(a.cols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > eps).count();
    let x = svd
        .solve(&DVector::from_column_slice(b), eps)
        .map_err(|e| NumericsError::Config(e.to_string()))?;
    Ok(LstsqFit {
        coef: x.iter().copied().collect(),
        rank,
        rank_deficient: rank < a.cols(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_transpose() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = a.matmul(&Mat::identity(2));
        assert_eq!(a, b);
        assert_eq!(a.transpose()[(0, 1)], 3.0);
        assert_eq!(a.matvec(&[1.0, 1.0]), vec![3.0, 7.0]);
    }

    #[test]
    fn lstsq_exact_line() {
        let a = Mat::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let b: Vec<f64> = (0..5).map(|i| 1.0 + 2.0 * i as f64).collect();
        let fit = lstsq(&a, &b).unwrap();
        assert!((fit.coef[0] - 1.0).abs() < 1e-10 && (fit.coef[1] - 2.0).abs() < 1e-10);
        assert!(!fit.rank_deficient);
    }

    #[test]
    fn lstsq_rank_deficient_is_min_norm() {
        // Two identical columns: min-norm splits the weight evenly.
        let a = Mat::from_fn(4, 2, |i, _| i as f64 + 1.0);
        let b: Vec<f64> = (0..4).map(|i| 2.0 * (i as f64 + 1.0)).collect();
        let fit = lstsq(&a, &b).unwrap();
        assert!(fit.rank_deficient);
        assert!((fit.coef[0] - 1.0).abs() < 1e-9 && (fit.coef[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_roundtrip() {
        let a = Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]);
        let p = a.matmul(&a.inverse().unwrap());
        assert!(p.max_abs_diff(&Mat::identity(2)) < 1e-12);
        assert!(Mat::zeros(2, 2).inverse().is_none());
    }
}
