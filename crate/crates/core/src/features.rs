//! Time-major frame matrices shared by every stage of the pipeline.

use crate::error::{Error, Result};

/// A `rows × cols` matrix of frames stored row-major. Rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
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

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on an empty matrix with cols == 0 would panic
        (0..self.rows).map(move |t| self.row(t))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Vertical concatenation of several sequences with equal width.
    pub fn concat(parts: &[&FeatureSequence]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: p.cols,
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }
}

/// Mean squared error over all entries, accumulated in f64.
pub fn mse(a: &FeatureSequence, b: &FeatureSequence) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if a.data.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}
