//! Row-compressed sparse matrix used for residual Jacobians.

use nalgebra::DMatrix;
use nalgebra_sparse::{CooMatrix, CsrMatrix};

/// Jacobian stored row by row. Entries within a row are not sorted and may
/// repeat a column; every product treats repeats as summed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseRows {
    ncols: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(ncols: usize, rows: usize, nnz: usize) -> Self {
        let mut m = Self::new(ncols);
        m.row_ptr.reserve(rows);
        m.cols.reserve(nnz);
        m.vals.reserve(nnz);
        m
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// Adds an entry to the row under construction.
    #[inline]
    pub fn push(&mut self, col: usize, val: f64) {
        debug_assert!(col < self.ncols, "column {col} >= {}", self.ncols);
        self.cols.push(col);
        self.vals.push(val);
    }

    /// Closes the row under construction.
    #[inline]
    pub fn end_row(&mut self) {
        self.row_ptr.push(self.cols.len());
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    pub fn scale(&mut self, s: f64) {
        self.vals.iter_mut().for_each(|v| *v *= s);
    }

    /// Appends the rows of `other` below these rows.
    pub fn append(&mut self, other: &SparseRows) {
        assert_eq!(self.ncols, other.ncols, "column count mismatch");
        let base = self.cols.len();
        self.cols.extend_from_slice(&other.cols);
        self.vals.extend_from_slice(&other.vals);
        self.row_ptr
            .extend(other.row_ptr[1..].iter().map(|&p| p + base));
    }

    /// Returns a copy whose columns are relabelled through `map`.
    pub fn remap_columns(&self, ncols: usize, map: &[usize]) -> SparseRows {
        SparseRows {
            ncols,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.iter().map(|&c| map[c]).collect(),
            vals: self.vals.clone(),
        }
    }

    /// `J x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&c, &v)| v * x[c]).sum()
            })
            .collect()
    }

    /// `Jᵀ y`
    pub fn tr_mul_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        for (i, &yi) in y.iter().enumerate() {
            let (c, v) = self.row(i);
            for (&c, &v) in c.iter().zip(v) {
                out[c] += v * yi;
            }
        }
        out
    }

    /// `JᵀJ x + mu x`, without forming the normal matrix.
    pub fn normal_mul_vec(&self, x: &[f64], mu: f64, out: &mut [f64]) {
        for (o, xi) in out.iter_mut().zip(x) {
            *o = mu * xi;
        }
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            let jx: f64 = c.iter().zip(v).map(|(&c, &v)| v * x[c]).sum();
            if jx != 0.0 {
                for (&c, &v) in c.iter().zip(v) {
                    out[c] += v * jx;
                }
            }
        }
    }

    /// Diagonal of `JᵀJ`.
    pub fn normal_diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.ncols];
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            // repeated columns within a row must be merged before squaring
            if has_repeats(c) {
                let mut merged: Vec<(usize, f64)> =
                    c.iter().copied().zip(v.iter().copied()).collect();
                merged.sort_by_key(|e| e.0);
                let mut k = 0;
                while k < merged.len() {
                    let col = merged[k].0;
                    let mut s = 0.0;
                    while k < merged.len() && merged[k].0 == col {
                        s += merged[k].1;
                        k += 1;
                    }
                    d[col] += s * s;
                }
            } else {
                for (&c, &v) in c.iter().zip(v) {
                    d[c] += v * v;
                }
            }
        }
        d
    }

    /// Diagonal blocks of `JᵀJ`. Block `k` spans columns
    /// `starts[k]..starts[k + 1]` (the last one runs to `ncols`).
    pub fn normal_block_diagonal(&self, starts: &[usize]) -> Vec<DMatrix<f64>> {
        let mut owner = vec![0usize; self.ncols];
        let mut blocks = Vec::with_capacity(starts.len());
        for (k, &lo) in starts.iter().enumerate() {
            let hi = starts.get(k + 1).copied().unwrap_or(self.ncols);
            owner[lo..hi].fill(k);
            blocks.push(DMatrix::zeros(hi - lo, hi - lo));
        }
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            // all ordered entry pairs, so repeated columns within a row merge
            for (&ca, &va) in c.iter().zip(v) {
                let k = owner[ca];
                let lo = starts[k];
                for (&cb, &vb) in c.iter().zip(v) {
                    if owner[cb] == k {
                        blocks[k][(ca - lo, cb - lo)] += va * vb;
                    }
                }
            }
        }
        blocks
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&c, &v) in c.iter().zip(v) {
                m[(i, c)] += v;
            }
        }
        m
    }

    /// Dense `JᵀJ`, accumulated row by row.
    pub fn normal_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.ncols, self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&ca, &va) in c.iter().zip(v) {
                for (&cb, &vb) in c.iter().zip(v) {
                    h[(ca, cb)] += va * vb;
                }
            }
        }
        h
    }

    pub fn to_csr(&self) -> CsrMatrix<f64> {
        let mut coo = CooMatrix::new(self.nrows(), self.ncols);
        for i in 0..self.nrows() {
            let (c, v) = self.row(i);
            for (&c, &v) in c.iter().zip(v) {
                coo.push(i, c, v);
            }
        }
        CsrMatrix::from(&coo)
    }
}

fn has_repeats(cols: &[usize]) -> bool {
    cols.len() > 1
        && cols
            .iter()
            .enumerate()
            .any(|(a, c)| cols[a + 1..].contains(c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> SparseRows {
        let mut m = SparseRows::new(3);
        m.push(0, 1.0);
        m.push(2, 2.0);
        m.end_row();
        m.push(1, -1.0);
        m.push(1, 3.0);
        m.end_row();
        m
    }

    #[test]
    fn products_agree_with_dense() {
        let m = sample();
        let d = m.to_dense();
        let x = [0.5, -2.0, 1.5];
        let jx = m.mul_vec(&x);
        let dense_jx = &d * nalgebra::DVector::from_column_slice(&x);
        for (a, b) in jx.iter().zip(dense_jx.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let h = m.normal_dense();
        assert!((h.clone() - d.transpose() * &d).amax() < 1e-14);
        let diag = m.normal_diagonal();
        for k in 0..3 {
            assert!((diag[k] - h[(k, k)]).abs() < 1e-14);
        }
        let mut out = [0.0; 3];
        m.normal_mul_vec(&x, 0.25, &mut out);
        let expect = &h * nalgebra::DVector::from_column_slice(&x)
            + nalgebra::DVector::from_column_slice(&x) * 0.25;
        for k in 0..3 {
            assert!((out[k] - expect[k]).abs() < 1e-13);
        }
    }

    #[test]
    fn block_diagonal_matches_dense_normal_matrix() {
        let m = sample();
        let h = m.normal_dense();
        let blocks = m.normal_block_diagonal(&[0, 1]);
        assert_eq!(blocks[0].shape(), (1, 1));
        assert_eq!(blocks[1].shape(), (2, 2));
        assert!((blocks[0][(0, 0)] - h[(0, 0)]).abs() < 1e-14);
        assert!((&blocks[1] - h.view((1, 1), (2, 2))).amax() < 1e-14);
    }

    #[test]
    fn append_and_remap() {
        let mut m = sample();
        m.append(&sample());
        assert_eq!(m.nrows(), 4);
        let r = m.remap_columns(3, &[2, 1, 0]);
        assert_eq!(r.row(2).0, &[2, 0]);
        let csr = r.to_csr();
        assert_eq!(csr.nrows(), 4);
    }
}
