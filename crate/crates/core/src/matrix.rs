//! Dense row-major sample matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An `n x d` block of finite reals stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    /// Builds a matrix, rejecting empty shapes, length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "sample matrix must be non-empty, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "SampleMatrix::new",
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("ragged rows"));
        }
        Self::new(n, d, rows.concat())
    }

    /// Single-column matrix.
    pub fn column(values: Vec<f64>) -> Result<Self> {
        Self::new(values.len(), 1, values)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Skips validation; callers guarantee finite data of the right length.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// Rows at the given indices, in that order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(idx.len(), self.cols, data)
    }

    /// Every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * c).collect())
    }

    /// `self` with `shift[j]` added to column `j`.
    pub fn translated(&self, shift: &[f64]) -> Self {
        assert_eq!(shift.len(), self.cols);
        let data = self
            .data
            .chunks(self.cols)
            .flat_map(|r| r.iter().zip(shift).map(|(v, s)| v + s))
            .collect();
        Self::from_raw(self.rows, self.cols, data)
    }
}
