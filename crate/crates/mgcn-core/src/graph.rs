//! Per-subject brain graph construction.
//!
//! Pipeline: ROI time series -> absolute Pearson connectivity (dense FC) ->
//! KNN sparsification -> renormalized propagation operator
//! P = D̃^(-1/2)(A+I)D̃^(-1/2). The normalized Laplacian is exposed for
//! diagnostics only; the model consumes P.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{pearson, Tensor};

/// How a KNN membership is symmetrized into an undirected adjacency.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnnMode {
    /// Keep an edge if it is top-K in its row OR its column.
    Union,
    /// Keep an edge only if top-K in both.
    Intersection,
}

/// Dense connectivity plus derived operators for one subject+modality.
#[derive(Clone, Debug)]
pub struct BrainGraph {
    pub dense_fc: Tensor,
    pub adjacency: Tensor,
    pub propagation: Tensor,
}

impl BrainGraph {
    pub fn build(ts: &Tensor, k: usize, mode: KnnMode, lenient: bool) -> Result<Self> {
        let dense_fc = pearson_fc(ts, lenient)?;
        let adjacency = knn_sparsify(&dense_fc, k, mode)?;
        let propagation = renorm_operator(&adjacency)?;
        Ok(BrainGraph {
            dense_fc,
            adjacency,
            propagation,
        })
    }
}

/// Absolute Pearson correlation between every pair of ROI time series.
/// Diagonal is 1. In lenient mode a zero-variance ROI yields correlation 0
/// with every other ROI instead of an error.
pub fn pearson_fc(ts: &Tensor, lenient: bool) -> Result<Tensor> {
    let q = ts.rows();
    let t = ts.cols();
    if t < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "need at least 2 time points, got {t}"
        )));
    }
    let rows: Vec<Vec<f64>> = (0..q)
        .map(|i| ts.array().row(i).to_vec())
        .collect();
    let mut degenerate = vec![false; q];
    for (i, row) in rows.iter().enumerate() {
        let mean = row.iter().sum::<f64>() / t as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        if var == 0.0 {
            if !lenient {
                return Err(CoreError::ZeroVariance { roi: i });
            }
            degenerate[i] = true;
        }
    }
    let mut fc = Array2::zeros((q, q));
    for i in 0..q {
        fc[[i, i]] = 1.0;
        for j in (i + 1)..q {
            let r = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                pearson(&rows[i], &rows[j])?.abs()
            };
            fc[[i, j]] = r;
            fc[[j, i]] = r;
        }
    }
    Tensor::new(fc)
}

/// Keep the largest K off-diagonal values per row (ties broken by lower
/// column index), then symmetrize. Diagonal is excluded from candidacy and
/// stays zero.
pub fn knn_sparsify(dense_fc: &Tensor, k: usize, mode: KnnMode) -> Result<Tensor> {
    let q = dense_fc.rows();
    if k == 0 || k > q.saturating_sub(1) {
        return Err(CoreError::KnnRange { k, q });
    }
    let mut keep = vec![vec![false; q]; q];
    for i in 0..q {
        let mut candidates: Vec<usize> = (0..q).filter(|&j| j != i).collect();
        candidates.sort_by(|&a, &b| {
            dense_fc
                .get(i, b)
                .partial_cmp(&dense_fc.get(i, a))
                .unwrap()
                .then(a.cmp(&b))
        });
        for &j in candidates.iter().take(k) {
            keep[i][j] = true;
        }
    }
    let mut adj = Array2::zeros((q, q));
    for i in 0..q {
        for j in 0..q {
            if i == j {
                continue;
            }
            let kept = match mode {
                KnnMode::Union => keep[i][j] || keep[j][i],
                KnnMode::Intersection => keep[i][j] && keep[j][i],
            };
            if kept {
                adj[[i, j]] = dense_fc.get(i, j);
            }
        }
    }
    Tensor::new(adj)
}

/// P = D̃^(-1/2)(A+I)D̃^(-1/2) with D̃ the degree matrix of A+I.
/// Self-loops guarantee strictly positive degrees.
pub fn renorm_operator(adjacency: &Tensor) -> Result<Tensor> {
    let q = adjacency.rows();
    let mut a_tilde = adjacency.array().clone();
    for i in 0..q {
        a_tilde[[i, i]] += 1.0;
    }
    let mut d_inv_sqrt = vec![0.0; q];
    for i in 0..q {
        let deg: f64 = a_tilde.row(i).sum();
        d_inv_sqrt[i] = 1.0 / deg.sqrt();
    }
    let mut p = a_tilde;
    for i in 0..q {
        for j in 0..q {
            p[[i, j]] *= d_inv_sqrt[i] * d_inv_sqrt[j];
        }
    }
    Tensor::new(p)
}

/// L_norm = I - D^(-1/2) A D^(-1/2). Isolated nodes keep their D^(-1/2)
/// entry at 0, giving an identity row/column.
pub fn normalized_laplacian(adjacency: &Tensor) -> Result<Tensor> {
    let q = adjacency.rows();
    let mut d_inv_sqrt = vec![0.0; q];
    for i in 0..q {
        let deg: f64 = adjacency.array().row(i).sum();
        if deg > 0.0 {
            d_inv_sqrt[i] = 1.0 / deg.sqrt();
        }
    }
    let mut l = Array2::eye(q);
    for i in 0..q {
        for j in 0..q {
            l[[i, j]] -= adjacency.get(i, j) * d_inv_sqrt[i] * d_inv_sqrt[j];
        }
    }
    Tensor::new(l)
}

/// Spectral radius of a symmetric matrix by power iteration.
pub fn spectral_radius(m: &Tensor, iters: usize) -> f64 {
    let q = m.rows();
    if q == 0 {
        return 0.0;
    }
    // deterministic non-degenerate start
    let mut v: Vec<f64> = (0..q).map(|i| 1.0 + (i as f64) * 0.01).collect();
    let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut lambda = 0.0;
    for _ in 0..iters {
        let mut w = vec![0.0; q];
        for i in 0..q {
            let mut acc = 0.0;
            for j in 0..q {
                acc += m.get(i, j) * v[j];
            }
            w[i] = acc;
        }
        let n = norm(&w);
        if n == 0.0 {
            return 0.0;
        }
        lambda = n / norm(&v).max(1e-300);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / n;
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn t(a: Array2<f64>) -> Tensor {
        Tensor::new(a).unwrap()
    }

    #[test]
    fn identical_rows_correlate_perfectly() {
        let ts = t(array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let fc = pearson_fc(&ts, false).unwrap();
        assert!((fc.get(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(fc.get(0, 0), 1.0);
    }

    #[test]
    fn anti_correlation_absolute_valued() {
        let ts = t(array![[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]]);
        let fc = pearson_fc(&ts, false).unwrap();
        assert!((fc.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_pearson_oracle() {
        let ts = t(array![[1.0, 2.0, 3.0], [1.0, 3.0, 2.0], [3.0, 2.0, 1.0]]);
        let fc = pearson_fc(&ts, false).unwrap();
        assert!((fc.get(0, 2) - 1.0).abs() < 1e-12);
        assert!((fc.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_row_errors_with_index() {
        let ts = t(array![[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]]);
        match pearson_fc(&ts, false) {
            Err(CoreError::ZeroVariance { roi }) => assert_eq!(roi, 0),
            other => panic!("expected zero-variance error, got {other:?}"),
        }
    }

    #[test]
    fn lenient_mode_zeroes_degenerate_rows() {
        let ts = t(array![[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]]);
        let fc = pearson_fc(&ts, true).unwrap();
        assert_eq!(fc.get(0, 1), 0.0);
        assert_eq!(fc.get(0, 0), 1.0);
    }

    #[test]
    fn knn_full_k_keeps_everything() {
        let fc = t(array![
            [1.0, 0.5, 0.2],
            [0.5, 1.0, 0.8],
            [0.2, 0.8, 1.0]
        ]);
        let a = knn_sparsify(&fc, 2, KnnMode::Union).unwrap();
        for i in 0..3 {
            assert_eq!(a.get(i, i), 0.0);
            for j in 0..3 {
                if i != j {
                    assert_eq!(a.get(i, j), fc.get(i, j));
                }
            }
        }
    }

    #[test]
    fn knn_chain_prunes_weakest() {
        // top-1 per row: row0 -> 1 (0.9), row1 -> 0 (0.9), row2 -> 1 (0.8)
        let fc = t(array![
            [1.0, 0.9, 0.1],
            [0.9, 1.0, 0.8],
            [0.1, 0.8, 1.0]
        ]);
        let a = knn_sparsify(&fc, 1, KnnMode::Union).unwrap();
        assert_eq!(a.get(0, 2), 0.0);
        assert_eq!(a.get(2, 0), 0.0);
        assert_eq!(a.get(0, 1), 0.9);
        assert_eq!(a.get(1, 2), 0.8);
    }

    #[test]
    fn knn_ties_break_to_lower_index_and_stay_symmetric() {
        let q = 5;
        let mut fc = Array2::from_elem((q, q), 0.4);
        for i in 0..q {
            fc[[i, i]] = 1.0;
        }
        let a = knn_sparsify(&t(fc), 2, KnnMode::Union).unwrap();
        // row 3 keeps columns 0 and 1 (lowest indices)
        assert!(a.get(3, 0) > 0.0 && a.get(3, 1) > 0.0);
        assert_eq!(a.get(3, 4), 0.0);
        for i in 0..q {
            for j in 0..q {
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn knn_k_out_of_range() {
        let fc = Tensor::eye(3);
        assert!(knn_sparsify(&fc, 0, KnnMode::Union).is_err());
        assert!(knn_sparsify(&fc, 3, KnnMode::Union).is_err());
    }

    #[test]
    fn renorm_of_empty_graph_is_identity() {
        let p = renorm_operator(&Tensor::zeros(4, 4)).unwrap();
        assert_eq!(p.array(), Tensor::eye(4).array());
    }

    #[test]
    fn renorm_two_node_unit_edge() {
        let a = t(array![[0.0, 1.0], [1.0, 0.0]]);
        let p = renorm_operator(&a).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.get(i, j) - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn renorm_spectral_radius_bounded() {
        let a = t(array![
            [0.0, 0.7, 0.0, 0.3],
            [0.7, 0.0, 0.5, 0.0],
            [0.0, 0.5, 0.0, 0.9],
            [0.3, 0.0, 0.9, 0.0]
        ]);
        let p = renorm_operator(&a).unwrap();
        assert!(spectral_radius(&p, 500) <= 1.0 + 1e-10);
    }

    #[test]
    fn laplacian_two_node_unit_edge() {
        let a = t(array![[0.0, 1.0], [1.0, 0.0]]);
        let l = normalized_laplacian(&a).unwrap();
        assert_eq!(l.array(), &array![[1.0, -1.0], [-1.0, 1.0]]);
    }

    #[test]
    fn laplacian_of_empty_graph_is_identity() {
        let l = normalized_laplacian(&Tensor::zeros(3, 3)).unwrap();
        assert_eq!(l.array(), Tensor::eye(3).array());
    }

    #[test]
    fn laplacian_smallest_eigenvalue_zero_for_connected_graph() {
        // eigenvalues of L in [0,2] <=> spectral radius of (L - I) <= 1;
        // constant-degree graph has exact zero eigenvalue: L d^(1/2) 1 = 0
        let a = t(array![
            [0.0, 1.0, 1.0],
            [1.0, 0.0, 1.0],
            [1.0, 1.0, 0.0]
        ]);
        let l = normalized_laplacian(&a).unwrap();
        let ones = [1.0, 1.0, 1.0];
        for i in 0..3 {
            let row: f64 = (0..3).map(|j| l.get(i, j) * ones[j]).sum();
            assert!(row.abs() < 1e-12);
        }
        let mut shifted = l.array().clone();
        for i in 0..3 {
            shifted[[i, i]] -= 1.0;
        }
        assert!(spectral_radius(&t(shifted), 500) <= 1.0 + 1e-9);
    }
}
