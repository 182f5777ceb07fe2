//! Dense row-major 2-D tensor over 64-bit floats.
//!
//! Everything in the kernel runs in f64 so that finite-difference checks hold
//! to tight tolerances and runs are bit-reproducible. Accumulations iterate
//! in fixed index order for the same reason.

use crate::error::{Result, SpclError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SpclError::Dimension(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor2 { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Collect a subset of rows into a new tensor.
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(indices.len(), self.cols);
        for (i, &r) in indices.iter().enumerate() {
            assert!(r < self.rows, "row index {r} out of range");
            out.row_mut(i).copy_from_slice(self.row(r));
        }
        out
    }

    /// y = x · wᵀ  where x is B×n and w is m×n, giving B×m.
    pub fn matmul_nt(&self, w: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, w.cols, "matmul_nt inner dims");
        let mut out = Tensor2::zeros(self.rows, w.rows);
        for b in 0..self.rows {
            let xr = self.row(b);
            for j in 0..w.rows {
                let wr = w.row(j);
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += xr[k] * wr[k];
                }
                *out.at_mut(b, j) = acc;
            }
        }
        out
    }

    /// y = x · w  where x is B×m and w is m×n, giving B×n.
    pub fn matmul_nn(&self, w: &Tensor2) -> Tensor2 {
        assert_eq!(self.cols, w.rows, "matmul_nn inner dims");
        let mut out = Tensor2::zeros(self.rows, w.cols);
        for b in 0..self.rows {
            let xr = self.row(b);
            for j in 0..w.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += xr[k] * w.at(k, j);
                }
                *out.at_mut(b, j) = acc;
            }
        }
        out
    }

    /// y = selfᵀ · x  where self is B×m and x is B×n, giving m×n.
    pub fn matmul_tn(&self, x: &Tensor2) -> Tensor2 {
        assert_eq!(self.rows, x.rows, "matmul_tn batch dims");
        let mut out = Tensor2::zeros(self.cols, x.cols);
        for j in 0..self.cols {
            for k in 0..x.cols {
                let mut acc = 0.0;
                for b in 0..self.rows {
                    acc += self.at(b, j) * x.at(b, k);
                }
                *out.at_mut(j, k) = acc;
            }
        }
        out
    }

    /// Column sums, e.g. the bias gradient of an affine layer.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            for c in 0..self.cols {
                out[c] += row[c];
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor2) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "add_assign shapes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
