//! Small dense numeric kernel: a row-major matrix and the handful of
//! loops the recurrent model needs.
//!
//! Batched recurrent state is stored unit-major (`[unit][column]`) so the
//! innermost loop always runs over contiguous batch columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "cannot concatenate {} rows with {} rows",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Matrix {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Vertical concatenation of row blocks sharing a column count.
    pub fn vcat(blocks: &[Matrix]) -> Result<Matrix> {
        let cols = blocks.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for b in blocks {
            if b.cols != cols {
                return Err(Error::Shape(format!(
                    "cannot stack {} columns under {cols}",
                    b.cols
                )));
            }
            data.extend_from_slice(&b.data);
            rows += b.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out[i][b] += sum_k w[i][k] * x[k][b]` for a row-major `w` of shape
/// `rows x inner` and unit-major `x` of shape `inner x batch`.
#[inline]
pub fn gemm_acc(w: &[f64], rows: usize, inner: usize, x: &[f64], batch: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * inner);
    debug_assert_eq!(x.len(), inner * batch);
    debug_assert_eq!(out.len(), rows * batch);
    for i in 0..rows {
        let w_row = &w[i * inner..(i + 1) * inner];
        let o = &mut out[i * batch..(i + 1) * batch];
        for (k, &wk) in w_row.iter().enumerate() {
            let xk = &x[k * batch..(k + 1) * batch];
            for (ob, &xb) in o.iter_mut().zip(xk) {
                *ob += wk * xb;
            }
        }
    }
}

/// `out[k][b] += sum_i w[i][k] * d[i][b]`: the transpose product used to
/// push gradients back through a weight matrix.
#[inline]
pub fn gemm_t_acc(w: &[f64], rows: usize, inner: usize, d: &[f64], batch: usize, out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * inner);
    debug_assert_eq!(d.len(), rows * batch);
    debug_assert_eq!(out.len(), inner * batch);
    for i in 0..rows {
        let w_row = &w[i * inner..(i + 1) * inner];
        let di = &d[i * batch..(i + 1) * batch];
        for (k, &wk) in w_row.iter().enumerate() {
            let o = &mut out[k * batch..(k + 1) * batch];
            for (ob, &db) in o.iter_mut().zip(di) {
                *ob += wk * db;
            }
        }
    }
}

/// `g[i][k] += sum_b d[i][b] * x[k][b]`: outer-product accumulation of a
/// weight gradient over the batch columns.
#[inline]
pub fn outer_acc(d: &[f64], rows: usize, x: &[f64], inner: usize, batch: usize, g: &mut [f64]) {
    debug_assert_eq!(d.len(), rows * batch);
    debug_assert_eq!(x.len(), inner * batch);
    debug_assert_eq!(g.len(), rows * inner);
    for i in 0..rows {
        let di = &d[i * batch..(i + 1) * batch];
        let g_row = &mut g[i * inner..(i + 1) * inner];
        for (k, gk) in g_row.iter_mut().enumerate() {
            let xk = &x[k * batch..(k + 1) * batch];
            *gk += dot(di, xk);
        }
    }
}

/// `g[i] += sum_b d[i][b]`.
#[inline]
pub fn row_sum_acc(d: &[f64], rows: usize, batch: usize, g: &mut [f64]) {
    for (i, gi) in g.iter_mut().enumerate().take(rows) {
        *gi += d[i * batch..(i + 1) * batch].iter().sum::<f64>();
    }
}

/// Adds `bias[i]` to every column of unit-major row `i`.
#[inline]
pub fn broadcast_rows(bias: &[f64], batch: usize, out: &mut [f64]) {
    for (i, &b) in bias.iter().enumerate() {
        for o in &mut out[i * batch..(i + 1) * batch] {
            *o = b;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic function. `exp` overflowing to infinity yields exactly 0.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let x = [1.0, -1.0, 0.5, 2.0, 0.0, 1.0]; // 3x2
        let mut out = [0.0; 4];
        gemm_acc(&w, 2, 3, &x, 2, &mut out);
        assert_eq!(out, [1.0 + 1.0, -1.0 + 4.0 + 3.0, 4.0 + 2.5, -4.0 + 10.0 + 6.0]);

        let mut back = [0.0; 6];
        gemm_t_acc(&w, 2, 3, &out, 2, &mut back);
        // column 0 of d is [2, 6.5]
        assert_eq!(back[0], 1.0 * 2.0 + 4.0 * 6.5);
    }

    #[test]
    fn hcat_and_slice() {
        let a = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let c = a.hcat(&b).unwrap();
        assert_eq!(c.row(1), &[2.0, 5.0, 6.0]);
        assert_eq!(c.slice_rows(1, 2).row(0), &[2.0, 5.0, 6.0]);
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(800.0) - 1.0).abs() < 1e-15);
    }
}
