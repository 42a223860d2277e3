//! Dense double-precision matrix type used throughout the pipeline.
//!
//! All model state, graph operators, and intermediate activations are
//! `Tensor`s. Entries are validated to be finite on construction; the
//! autodiff tape re-checks after every primitive.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    data: Array2<f64>,
}

impl Tensor {
    /// Build from an ndarray, rejecting NaN/Inf entries.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "tensor-new" });
        }
        Ok(Tensor { data })
    }

    /// Build without the finiteness check. Callers must guarantee finite input.
    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        Tensor { data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            data: Array2::zeros((rows, cols)),
        }
    }

    pub fn eye(n: usize) -> Self {
        Tensor {
            data: Array2::eye(n),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Array2::zeros((nrows, ncols));
        for (i, row) in rows.iter().enumerate() {
            if row.len() != ncols {
                return Err(CoreError::ShapeMismatch {
                    op: "from-rows",
                    left: (nrows, ncols),
                    right: (i, row.len()),
                });
            }
            for (j, &v) in row.iter().enumerate() {
                data[[i, j]] = v;
            }
        }
        Tensor::new(data)
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64]) -> Result<Self> {
        let data = Array2::from_shape_vec((values.len(), 1), values.to_vec())
            .expect("column shape always valid");
        Tensor::new(data)
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[[i, j]] = v;
    }

    pub fn array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    /// Scalar value of a 1x1 tensor.
    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[[0, 0]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major flattening (ROI-then-channel order for embeddings).
    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    pub fn transposed(&self) -> Tensor {
        Tensor {
            data: self.data.t().to_owned(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }
}

/// Pearson correlation between two equal-length slices.
/// Errors when either slice has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(CoreError::ZeroVarianceSimilarity);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}
