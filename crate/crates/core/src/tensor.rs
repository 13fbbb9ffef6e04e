//! Dense row-major f64 tensor, 1-D or 2-D.
//!
//! All model math runs in double precision so analytic gradients can be
//! validated against central finite differences; checkpoints downcast to
//! f32 on disk.

use crate::error::{Error, Result};

/// Row-major tensor. `dims` has length 1 (vector) or 2 (matrix).
/// Vectors behave like single-row matrices in matrix ops.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(
            (1..=2).contains(&dims.len()) && dims.iter().all(|&d| d > 0),
            "tensor dims must be 1-D or 2-D and nonzero, got {dims:?}"
        );
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            data.len(),
            "dims {dims:?} do not match data length {}",
            data.len()
        );
        assert!((1..=2).contains(&dims.len()));
        Tensor {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::from_vec(&[n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Rows when viewed as a matrix (vectors are single rows).
    pub fn rows(&self) -> usize {
        if self.dims.len() == 1 {
            1
        } else {
            self.dims[0]
        }
    }

    /// Columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows() && c < self.cols());
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        debug_assert!(r < self.rows() && c < cols);
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::numerics(Some(name), "tensor contains a non-finite value"))
        }
    }

    /// `self @ other` for 2-D views.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(k, k2, "matmul shape mismatch: {m}x{k} @ {k2}x{n}");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = self.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(p);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.at(i, j);
            }
        }
        Tensor::matrix(n, m, out)
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum of squared entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}
