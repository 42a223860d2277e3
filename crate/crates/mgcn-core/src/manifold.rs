//! Subject-similarity structure and the manifold penalty.
//!
//! Within-modality similarity is the absolute Pearson correlation of
//! vectorized dense FC matrices; between-modality similarity is the product
//! S^(p)S^(q). The penalty is available both as trace(Z^T L Z) (used in
//! training) and as the explicit pairwise double sum (the test oracle).

use ndarray::Array2;

use crate::error::{CoreError, Result};
use crate::tensor::{pearson, Tensor};

/// |Pearson| between two vectorized dense FC matrices of one modality.
pub fn subject_similarity(fc_i: &Tensor, fc_j: &Tensor) -> Result<f64> {
    if fc_i.shape() != fc_j.shape() {
        return Err(CoreError::ShapeMismatch {
            op: "subject-similarity",
            left: fc_i.shape(),
            right: fc_j.shape(),
        });
    }
    Ok(pearson(&fc_i.flatten(), &fc_j.flatten())?.abs())
}

/// N x N similarity matrix for one modality from its dense FC matrices.
pub fn modality_similarity(dense_fcs: &[Tensor]) -> Result<Tensor> {
    let n = dense_fcs.len();
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = subject_similarity(&dense_fcs[i], &dense_fcs[j])?;
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Tensor::new(s)
}

/// Assembled MN x MN block similarity matrix with its graph Laplacian.
/// Row/column order is modality-major: all modality-1 subjects first.
#[derive(Clone, Debug)]
pub struct SimilarityBlock {
    pub per_modality: Vec<Tensor>,
    pub eta1: f64,
    pub eta2: f64,
    pub s: Tensor,
    pub laplacian: Tensor,
    pub modalities: usize,
    pub subjects: usize,
}

/// Diagonal blocks η2 S^(m); off-diagonal blocks η1 S^(p)S^(q).
pub fn assemble_block(per_modality: &[Tensor], eta1: f64, eta2: f64) -> Result<SimilarityBlock> {
    let m = per_modality.len();
    let n = per_modality[0].rows();
    let sizes: Vec<usize> = per_modality.iter().map(|s| s.rows()).collect();
    if sizes.iter().any(|&sz| sz != n) {
        return Err(CoreError::InconsistentSubjects(sizes));
    }
    let mut s = Array2::zeros((m * n, m * n));
    for p in 0..m {
        for q in 0..m {
            let block = if p == q {
                per_modality[p].array() * eta2
            } else {
                per_modality[p].array().dot(per_modality[q].array()) * eta1
            };
            s.slice_mut(ndarray::s![p * n..(p + 1) * n, q * n..(q + 1) * n])
                .assign(&block);
        }
    }
    let mut laplacian = -s.clone();
    for i in 0..m * n {
        laplacian[[i, i]] += s.row(i).sum();
    }
    Ok(SimilarityBlock {
        per_modality: per_modality.to_vec(),
        eta1,
        eta2,
        s: Tensor::new(s)?,
        laplacian: Tensor::new(laplacian)?,
        modalities: m,
        subjects: n,
    })
}

/// Ordering metadata carried with a stacked embedding matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StackOrder {
    pub modalities: usize,
    pub subjects: usize,
}

/// trace(Z^T L Z) for a modality-major stacked embedding matrix.
pub fn manifold_penalty_trace(
    z_stack: &Tensor,
    order: StackOrder,
    block: &SimilarityBlock,
) -> Result<f64> {
    if order.modalities != block.modalities || order.subjects != block.subjects {
        return Err(CoreError::StackOrderMismatch {
            expected_m: block.modalities,
            expected_n: block.subjects,
            got_m: order.modalities,
            got_n: order.subjects,
        });
    }
    let lz = block.laplacian.array().dot(z_stack.array());
    Ok((z_stack.array() * &lz).sum())
}

/// Explicit Eq.-style double sum; the independent oracle for the trace form.
pub fn manifold_penalty_pairwise(
    per_modality_z: &[Tensor],
    per_modality_s: &[Tensor],
    eta1: f64,
    eta2: f64,
) -> Result<f64> {
    let m = per_modality_z.len();
    let n = per_modality_z[0].rows();
    let sq_dist = |a: &Tensor, i: usize, b: &Tensor, j: usize| -> f64 {
        a.array()
            .row(i)
            .iter()
            .zip(b.array().row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    };
    let mut within = 0.0;
    for mm in 0..m {
        for i in 0..n {
            for j in 0..n {
                within += per_modality_s[mm].get(i, j)
                    * sq_dist(&per_modality_z[mm], i, &per_modality_z[mm], j);
            }
        }
    }
    let mut between = 0.0;
    for p in 0..m {
        for q in 0..m {
            if p == q {
                continue;
            }
            let spq = per_modality_s[p].array().dot(per_modality_s[q].array());
            for i in 0..n {
                for j in 0..n {
                    between += spq[[i, j]]
                        * sq_dist(&per_modality_z[p], i, &per_modality_z[q], j);
                }
            }
        }
    }
    Ok(eta2 * 0.5 * within + eta1 * 0.5 * between)
}
