//! Compressed sparse row storage for exact-valued outliers.

use crate::error::{QftError, Result};
use crate::tensor::{Real, Tensor};

/// Bytes per stored row offset and column index.
pub const INDEX_BYTES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseOutliers<T = f32> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u32>,
    col_idx: Vec<u32>,
    values: Vec<T>,
}

impl<T: Real> SparseOutliers<T> {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Assemble from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        row_ptr: Vec<u32>,
        col_idx: Vec<u32>,
        values: Vec<T>,
    ) -> Result<Self> {
        let csr = Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        };
        csr.validate()?;
        Ok(csr)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(QftError::InvalidArgument(format!("CSR: {msg}")));
        if self.row_ptr.len() != self.rows + 1 {
            return bad(format!(
                "row_ptr has {} entries for {} rows",
                self.row_ptr.len(),
                self.rows
            ));
        }
        if self.row_ptr[0] != 0 {
            return bad("row_ptr[0] != 0".into());
        }
        let nnz = self.col_idx.len();
        if self.values.len() != nnz || self.row_ptr[self.rows] as usize != nnz {
            return bad(format!(
                "nnz disagreement: row_ptr end {}, col_idx {}, values {}",
                self.row_ptr[self.rows],
                nnz,
                self.values.len()
            ));
        }
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            if a > b {
                return bad(format!("row_ptr decreases at row {r}"));
            }
            let cols = &self.col_idx[a..b];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("column indices not strictly increasing in row {r}"));
            }
            if cols.last().is_some_and(|&c| c as usize >= self.cols) {
                return bad(format!("column index out of bounds in row {r}"));
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[u32] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// `(col, value)` entries of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
        self.col_idx[a..b]
            .iter()
            .zip(&self.values[a..b])
            .map(|(&c, &v)| (c as usize, v))
    }

    /// `(row, col, value)` triples in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    /// Write every stored value into `dst`, replacing what was there.
    pub fn scatter_into(&self, dst: &mut Tensor<T>) {
        for (r, c, v) in self.iter() {
            dst.set(r, c, v);
        }
    }

    pub fn storage_bytes(&self) -> usize {
        (self.row_ptr.len() + self.col_idx.len()) * INDEX_BYTES + self.values.len() * T::BYTES
    }
}

/// Row-by-row builder; columns must be pushed in increasing order.
pub(crate) struct CsrBuilder<T> {
    rows: usize,
    cols: usize,
    row_ptr: Vec<u32>,
    col_idx: Vec<u32>,
    values: Vec<T>,
}

impl<T: Real> CsrBuilder<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(rows + 1);
        row_ptr.push(0);
        Self {
            rows,
            cols,
            row_ptr,
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    #[inline]
    pub fn push(&mut self, col: usize, value: T) {
        self.col_idx.push(col as u32);
        self.values.push(value);
    }

    #[inline]
    pub fn end_row(&mut self) {
        self.row_ptr.push(self.col_idx.len() as u32);
    }

    pub fn finish(self) -> SparseOutliers<T> {
        debug_assert_eq!(self.row_ptr.len(), self.rows + 1);
        SparseOutliers {
            rows: self.rows,
            cols: self.cols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            values: self.values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_produces_valid_csr() {
        let mut b = CsrBuilder::<f32>::new(3, 4);
        b.push(1, 5.0);
        b.push(3, -2.0);
        b.end_row();
        b.end_row();
        b.push(0, 9.0);
        b.end_row();
        let s = b.finish();
        s.validate().unwrap();
        assert_eq!(s.row_ptr(), &[0, 2, 2, 3]);
        assert_eq!(s.nnz(), 3);
        let triples: Vec<_> = s.iter().collect();
        assert_eq!(triples, vec![(0, 1, 5.0), (0, 3, -2.0), (2, 0, 9.0)]);
        assert_eq!(s.storage_bytes(), (4 + 3) * 4 + 3 * 4);
    }

    #[test]
    fn validate_rejects_malformed_arrays() {
        let ok = SparseOutliers::<f32>::from_csr(2, 3, vec![0, 1, 2], vec![2, 0], vec![1.0, 2.0]);
        assert!(ok.is_ok());
        // decreasing row_ptr
        assert!(SparseOutliers::<f32>::from_csr(2, 3, vec![0, 2, 1], vec![0, 1], vec![1.0, 2.0]).is_err());
        // duplicate column within a row
        assert!(SparseOutliers::<f32>::from_csr(1, 3, vec![0, 2], vec![1, 1], vec![1.0, 2.0]).is_err());
        // nnz disagreement
        assert!(SparseOutliers::<f32>::from_csr(1, 3, vec![0, 2], vec![0, 1], vec![1.0]).is_err());
        // column out of bounds
        assert!(SparseOutliers::<f32>::from_csr(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
        // wrong row_ptr length
        assert!(SparseOutliers::<f32>::from_csr(2, 3, vec![0, 0], vec![], vec![]).is_err());
    }

    #[test]
    fn scatter_overwrites_positions() {
        let s = SparseOutliers::from_csr(2, 2, vec![0, 0, 1], vec![1], vec![100.0f32]).unwrap();
        let mut t = Tensor::filled(2, 2, 1.0f32);
        s.scatter_into(&mut t);
        assert_eq!(t.data(), &[1.0, 1.0, 1.0, 100.0]);
    }
}
