//! Compressed sparse row matrices.
//!
//! Only the handful of products the layers need are implemented: sparse times
//! dense, the transposed product, and a transpose.

use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds a matrix from raw CSR arrays. Columns within a row must be
    /// strictly increasing.
    pub fn from_raw(
        nrows: usize,
        ncols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<T>,
    ) -> Result<Self> {
        if row_ptr.len() != nrows + 1 || row_ptr[0] != 0 {
            return Err(Error::shape(
                "csr",
                "row_ptr must have nrows + 1 entries starting at 0",
            ));
        }
        if col_idx.len() != values.len() || *row_ptr.last().unwrap() != values.len() {
            return Err(Error::shape(
                "csr",
                "row_ptr, col_idx and values disagree on nnz",
            ));
        }
        for r in 0..nrows {
            let (lo, hi) = (row_ptr[r], row_ptr[r + 1]);
            if lo > hi {
                return Err(Error::shape("csr", format!("row_ptr decreases at row {r}")));
            }
            let cols = &col_idx[lo..hi];
            if cols.iter().any(|&c| c >= ncols) || cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::shape(
                    "csr",
                    format!("bad column indices in row {r}"),
                ));
            }
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        mut entries: Vec<(usize, usize, T)>,
    ) -> Result<Self> {
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= nrows || *c >= ncols) {
            return Err(Error::shape(
                "csr",
                format!("entry ({r}, {c}) outside {nrows}x{ncols}"),
            ));
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; nrows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values: Vec<T> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                let tail = values.last_mut().unwrap();
                *tail += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(v);
        }
        for r in 0..nrows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Keeps the nonzero entries of a dense matrix.
    pub fn from_dense(dense: ArrayView2<'_, T>) -> Self {
        let (nrows, ncols) = dense.dim();
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in dense.rows() {
            for (c, &v) in row.iter().enumerate() {
                if v != T::zero() {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(values.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[T]) {
        let (lo, hi) = (self.row_ptr[r], self.row_ptr[r + 1]);
        (&self.col_idx[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => T::zero(),
        }
    }

    /// Same sparsity pattern, values replaced by `f(value, flat_index)`.
    pub fn map_values(&self, mut f: impl FnMut(T, usize) -> T) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, k))
            .collect();
        Self {
            values,
            ..self.clone()
        }
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.nrows, self.ncols));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.ncols {
            counts[c + 1] += counts[c];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0usize; self.nnz()];
        let mut values = vec![T::zero(); self.nnz()];
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let at = next[c];
                col_idx[at] = r;
                values[at] = v;
                next[c] += 1;
            }
        }
        Self {
            nrows: self.ncols,
            ncols: self.nrows,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// `self · dense`. Rows of the output are computed independently.
    pub fn matmul(&self, dense: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if dense.nrows() != self.ncols {
            return Err(Error::shape(
                "csr matmul",
                format!(
                    "{}x{} times {}x{}",
                    self.nrows,
                    self.ncols,
                    dense.nrows(),
                    dense.ncols()
                ),
            ));
        }
        let mut out = Array2::zeros((self.nrows, dense.ncols()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(r, mut out_row)| {
                let (cols, vals) = self.row(r);
                for (&c, &v) in cols.iter().zip(vals) {
                    out_row.scaled_add(v, &dense.row(c));
                }
            });
        Ok(out)
    }

    /// `selfᵀ · dense` without materializing the transpose.
    pub fn transpose_matmul(&self, dense: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if dense.nrows() != self.nrows {
            return Err(Error::shape(
                "csr transpose matmul",
                format!(
                    "({}x{})ᵀ times {}x{}",
                    self.nrows,
                    self.ncols,
                    dense.nrows(),
                    dense.ncols()
                ),
            ));
        }
        let mut out = Array2::zeros((self.ncols, dense.ncols()));
        for r in 0..self.nrows {
            let (cols, vals) = self.row(r);
            let src = dense.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.row_mut(c).scaled_add(v, &src);
            }
        }
        Ok(out)
    }
}
