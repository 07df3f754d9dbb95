use serde::Serialize;

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
///
/// Construction validates the shape and rejects NaN/Inf, so every `Matrix`
/// in circulation satisfies both invariants.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let expected = rows.checked_mul(cols).ok_or_else(|| {
            Error::Dimension(format!("shape {rows}x{cols} overflows"))
        })?;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite { index, value });
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows instead.
        let cols = self.cols;
        (0..self.rows).map(move |i| &self.data[i * cols..(i + 1) * cols])
    }

    /// First `n` rows as a new matrix.
    pub fn prefix_rows(&self, n: usize) -> Result<Self> {
        if n > self.rows {
            return Err(Error::Range(format!(
                "requested {n} rows from a matrix with {}",
                self.rows
            )));
        }
        Ok(Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        })
    }

    /// Top-left `n x n` block.
    pub fn leading_square(&self, n: usize) -> Result<Self> {
        if n > self.rows || n > self.cols {
            return Err(Error::Range(format!(
                "requested {n}x{n} block from a {}x{} matrix",
                self.rows, self.cols
            )));
        }
        let data = (0..n)
            .flat_map(|i| self.row(i)[..n].iter().copied())
            .collect();
        Ok(Self {
            rows: n,
            cols: n,
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Euclidean distance between `alpha * x` and `s`.
pub(crate) fn scaled_distance(alpha: f64, x: &[f64], s: &[f64]) -> f64 {
    x.iter()
        .zip(s)
        .map(|(xi, si)| {
            let d = alpha * xi - si;
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    scaled_distance(1.0, a, b)
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
