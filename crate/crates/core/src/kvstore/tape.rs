use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Base-model hidden states aligned to committed positions (row `i` is the
/// hidden state produced for the token at position `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTape {
    dim: usize,
    data: Vec<f64>,
}

impl HiddenTape {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.row(self.len() - 1))
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::shape("HiddenTape::push", format!("{} != {}", row.len(), self.dim)));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: &Matrix) -> Result<()> {
        if rows.rows() > 0 && rows.cols() != self.dim {
            return Err(Error::shape("HiddenTape::extend", "width mismatch"));
        }
        self.data.extend_from_slice(rows.data());
        Ok(())
    }

    pub fn truncate(&mut self, len: usize) {
        self.data.truncate(len * self.dim);
    }

    /// Rows `[start, end)` as a matrix.
    pub fn slice(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(end - start, self.dim, self.data[start * self.dim..end * self.dim].to_vec())
            .expect("tape slice is rectangular")
    }
}
