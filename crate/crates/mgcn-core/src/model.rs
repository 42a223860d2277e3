//! Model definition: per-modality two-layer GCN encoders with shared
//! weights, MLP fusion head, baseline variants, and the masked-propagation
//! mode for edge-mask learning.
//!
//! Encoder: Z = sigmoid(P * relu(P X Θ0) Θ1), no GCN biases. Fusion: the M
//! vectorized embeddings of a subject are concatenated and passed through
//! two ReLU dense layers and a linear scalar output. All subjects within a
//! modality share Θ0/Θ1.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PreparedDataset;
use crate::error::{CoreError, Result};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Channel and hidden-layer sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// First GCN layer channels.
    pub channels1: usize,
    /// Second GCN layer channels (embedding width).
    pub channels2: usize,
    /// First dense layer width.
    pub hidden1: usize,
    /// Second dense layer width.
    pub hidden2: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels1: 128,
            channels2: 32,
            hidden1: 1024,
            hidden2: 2048,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Multi-modal GCN with manifold regularization.
    Mgcn,
    /// Multi-modal GCN without the manifold term.
    MgcnNoReg,
    /// Single-modality GCN (index into the model's modality list).
    GcnSingle,
    /// MLP on concatenated vectorized dense FC.
    Mlp,
    /// Per-modality GCN encoders with mean view pooling, no manifold term.
    Mvgcn,
}

impl ModelKind {
    pub fn uses_encoders(&self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }

    pub fn uses_manifold(&self) -> bool {
        matches!(self, ModelKind::Mgcn)
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    /// Included in the L2 weight penalty (weight matrices yes, biases and
    /// the mask parameter no).
    pub decay: bool,
}

/// Full parameter set plus the shape metadata needed to rebuild it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub version: u32,
    pub kind: ModelKind,
    pub config: ModelConfig,
    /// Modality names this model consumes, in dataset order.
    pub modalities: Vec<String>,
    /// Per-modality time-series length.
    pub t_lens: Vec<usize>,
    pub q: usize,
    pub seed: u64,
    pub params: Vec<NamedParam>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let mut t = Tensor::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            t.set(i, j, dist.sample(rng));
        }
    }
    t
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl ModelParams {
    /// Initialize parameters. Each tensor draws from its own seeded stream,
    /// so two models sharing a (seed, role, modality-index) triple start
    /// from identical values regardless of which other parameters exist.
    pub fn init(
        kind: ModelKind,
        config: ModelConfig,
        modalities: Vec<String>,
        t_lens: Vec<usize>,
        q: usize,
        seed: u64,
        with_mask: bool,
    ) -> Result<Self> {
        if modalities.is_empty() || modalities.len() != t_lens.len() {
            return Err(CoreError::InvalidConfig(
                "modality names and lengths must be non-empty and equal-length".into(),
            ));
        }
        let m = modalities.len();
        let qc = q * config.channels2;
        let mut params = Vec::new();
        if kind.uses_encoders() {
            for (idx, &t_len) in t_lens.iter().enumerate() {
                params.push(NamedParam {
                    name: format!("theta0.{idx}"),
                    tensor: glorot(
                        &mut stream_rng(seed, 0x100 + idx as u64),
                        t_len,
                        config.channels1,
                    ),
                    decay: true,
                });
                params.push(NamedParam {
                    name: format!("theta1.{idx}"),
                    tensor: glorot(
                        &mut stream_rng(seed, 0x200 + idx as u64),
                        config.channels1,
                        config.channels2,
                    ),
                    decay: true,
                });
            }
        }
        let in_dim = match kind {
            ModelKind::Mlp => m * q * q,
            ModelKind::Mvgcn => qc,
            _ => m * qc,
        };
        params.push(NamedParam {
            name: "w1".into(),
            tensor: glorot(&mut stream_rng(seed, 0x300), in_dim, config.hidden1),
            decay: true,
        });
        params.push(NamedParam {
            name: "b1".into(),
            tensor: Tensor::zeros(1, config.hidden1),
            decay: false,
        });
        params.push(NamedParam {
            name: "w2".into(),
            tensor: glorot(&mut stream_rng(seed, 0x301), config.hidden1, config.hidden2),
            decay: true,
        });
        params.push(NamedParam {
            name: "b2".into(),
            tensor: Tensor::zeros(1, config.hidden2),
            decay: false,
        });
        params.push(NamedParam {
            name: "w3".into(),
            tensor: glorot(&mut stream_rng(seed, 0x302), config.hidden2, 1),
            decay: true,
        });
        params.push(NamedParam {
            name: "b3".into(),
            tensor: Tensor::zeros(1, 1),
            decay: false,
        });
        if with_mask {
            // small positive constant: ReLU(V+V^T) starts active everywhere,
            // L1 prunes from there (zero init would be gradient-dead)
            let mut v = Tensor::zeros(q, q);
            for i in 0..q {
                for j in 0..q {
                    v.set(i, j, 0.05);
                }
            }
            params.push(NamedParam {
                name: "mask_v".into(),
                tensor: v,
                decay: false,
            });
        }
        Ok(ModelParams {
            version: 1,
            kind,
            config,
            modalities,
            t_lens,
            q,
            seed,
            params,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn has_mask(&self) -> bool {
        self.get("mask_v").is_some()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        crate::data::atomic_write(path, json.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let params: ModelParams =
            serde_json::from_str(&text).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        if params.version != 1 {
            return Err(CoreError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                params.version
            )));
        }
        Ok(params)
    }
}

/// Tape handles produced by one forward pass.
pub struct ForwardArtifacts {
    /// N x 1 predictions.
    pub yhat: TensorId,
    /// Per-modality N x QC vectorized embeddings (encoder kinds only).
    pub z_modality: Vec<TensorId>,
    /// MN x QC modality-major stack (encoder kinds only).
    pub z_stack: Option<TensorId>,
    /// M = ReLU(V + V^T), present in mask mode.
    pub mask: Option<TensorId>,
    /// (param index, leaf id) for every parameter, in `params` order.
    pub leaves: Vec<(usize, TensorId)>,
}

/// One GCN layer under an edge mask:
/// phi((ReLU(V+V^T)+I) ⊙ P · H · Θ). Exposed standalone; the full forward
/// shares the mask nodes across layers and subjects.
pub fn masked_propagate(
    tape: &mut Tape,
    v: TensorId,
    p: TensorId,
    h: TensorId,
    theta: TensorId,
    activation: Activation,
) -> Result<TensorId> {
    let q = tape.shape(p).0;
    let vt = tape.transpose(v)?;
    let sym = tape.add(v, vt)?;
    let mask = tape.relu(sym)?;
    let eye = tape.constant(Tensor::eye(q));
    let mask_i = tape.add(mask, eye)?;
    let op = tape.hadamard(mask_i, p)?;
    let ht = tape.matmul(h, theta)?;
    let out = tape.matmul(op, ht)?;
    apply_activation(tape, out, activation)
}

#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

fn apply_activation(tape: &mut Tape, x: TensorId, a: Activation) -> Result<TensorId> {
    match a {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Linear => Ok(x),
    }
}

/// Build the forward pass for the given subjects onto `tape`.
///
/// `subject_idx` selects rows of `data`; the embedding stack is
/// modality-major over exactly these subjects in the given order.
pub fn build_forward(
    tape: &mut Tape,
    params: &ModelParams,
    data: &PreparedDataset,
    subject_idx: &[usize],
) -> Result<ForwardArtifacts> {
    let modality_idx: Vec<usize> = params
        .modalities
        .iter()
        .map(|name| {
            data.modality_index(name).ok_or_else(|| CoreError::MissingModality {
                subject: 0,
                modality: name.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let q = params.q;
    let c2 = params.config.channels2;
    let qc = q * c2;

    let mut leaves = Vec::with_capacity(params.params.len());
    for (i, p) in params.params.iter().enumerate() {
        leaves.push((i, tape.param(p.tensor.clone())));
    }
    let leaf = |name: &str| -> TensorId {
        let idx = params
            .params
            .iter()
            .position(|p| p.name == name)
            .expect("parameter exists");
        leaves[idx].1
    };

    // shared mask nodes
    let mask_plus_i = if params.has_mask() {
        let v = leaf("mask_v");
        let vt = tape.transpose(v)?;
        let sym = tape.add(v, vt)?;
        let mask = tape.relu(sym)?;
        let eye = tape.constant(Tensor::eye(q));
        Some((mask, tape.add(mask, eye)?))
    } else {
        None
    };

    let mut z_modality = Vec::new();

    if params.kind.uses_encoders() {
        for (local_m, &ds_m) in modality_idx.iter().enumerate() {
            let theta0 = leaf(&format!("theta0.{local_m}"));
            let theta1 = leaf(&format!("theta1.{local_m}"));
            let mut rows = Vec::with_capacity(subject_idx.len());
            for &n in subject_idx {
                let subject = &data.subjects[n];
                let x = tape.constant(subject.ts[ds_m].clone());
                let p_const = tape.constant(subject.graphs[ds_m].propagation.clone());
                let op = match mask_plus_i {
                    Some((_, mi)) => tape.hadamard(mi, p_const)?,
                    None => p_const,
                };
                let xw = tape.matmul(x, theta0)?;
                let h = tape.matmul(op, xw)?;
                let h = tape.relu(h)?;
                let hw = tape.matmul(h, theta1)?;
                let z = tape.matmul(op, hw)?;
                let z = tape.sigmoid(z)?;
                let zvec = tape.reshape(z, 1, qc)?;
                rows.push(zvec);
            }
            z_modality.push(tape.concat_rows(&rows)?);
        }
    }

    let mlp_in = match params.kind {
        ModelKind::Mlp => {
            let mut rows = Vec::with_capacity(subject_idx.len());
            for &n in subject_idx {
                let subject = &data.subjects[n];
                let parts: Vec<TensorId> = modality_idx
                    .iter()
                    .map(|&m| {
                        let fc = tape.constant(subject.graphs[m].dense_fc.clone());
                        tape.reshape(fc, 1, q * q)
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(tape.concat_cols(&parts)?);
            }
            tape.concat_rows(&rows)?
        }
        ModelKind::Mvgcn => {
            let m = z_modality.len() as f64;
            let mut acc = z_modality[0];
            for &zm in &z_modality[1..] {
                acc = tape.add(acc, zm)?;
            }
            tape.scale(acc, 1.0 / m)?
        }
        _ => tape.concat_cols(&z_modality)?,
    };

    let h1 = tape.matmul(mlp_in, leaf("w1"))?;
    let h1 = tape.add_row_vec(h1, leaf("b1"))?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.matmul(h1, leaf("w2"))?;
    let h2 = tape.add_row_vec(h2, leaf("b2"))?;
    let h2 = tape.relu(h2)?;
    let out = tape.matmul(h2, leaf("w3"))?;
    let yhat = tape.add_row_vec(out, leaf("b3"))?;

    let z_stack = if z_modality.is_empty() {
        None
    } else {
        Some(tape.concat_rows(&z_modality)?)
    };

    Ok(ForwardArtifacts {
        yhat,
        z_modality,
        z_stack,
        mask: mask_plus_i.map(|(m, _)| m),
        leaves,
    })
}

/// Forward-only prediction for the given subjects.
pub fn predict(params: &ModelParams, data: &PreparedDataset, subject_idx: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let art = build_forward(&mut tape, params, data, subject_idx)?;
    Ok(tape.value(art.yhat).array().column(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::tiny_dataset;
    use ndarray::Array2;

    #[test]
    fn zero_theta_gives_half_embeddings() {
        // Θ0 = 0 -> hidden 0 -> relu 0 -> z = sigmoid(0) = 0.5
        let data = tiny_dataset(3, 4, 2, 6, 11);
        let mut params = ModelParams::init(
            ModelKind::Mgcn,
            ModelConfig {
                channels1: 3,
                channels2: 2,
                hidden1: 4,
                hidden2: 3,
            },
            data.modality_names(),
            data.t_lens(),
            4,
            1,
            false,
        )
        .unwrap();
        for p in &mut params.params {
            if p.name.starts_with("theta0") {
                p.tensor = Tensor::zeros(p.tensor.rows(), p.tensor.cols());
            }
        }
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &[0, 1, 2]).unwrap();
        let z = tape.value(art.z_modality[0]);
        assert!(z.array().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn zero_weights_give_zero_predictions() {
        let data = tiny_dataset(3, 4, 2, 6, 12);
        let mut params = ModelParams::init(
            ModelKind::Mgcn,
            ModelConfig {
                channels1: 3,
                channels2: 2,
                hidden1: 4,
                hidden2: 3,
            },
            data.modality_names(),
            data.t_lens(),
            4,
            1,
            false,
        )
        .unwrap();
        for p in &mut params.params {
            p.tensor = Tensor::zeros(p.tensor.rows(), p.tensor.cols());
        }
        let yhat = predict(&params, &data, &[0, 1, 2]).unwrap();
        assert!(yhat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuting_subjects_permutes_predictions() {
        let data = tiny_dataset(4, 4, 2, 6, 13);
        let params = ModelParams::init(
            ModelKind::Mgcn,
            ModelConfig {
                channels1: 3,
                channels2: 2,
                hidden1: 4,
                hidden2: 3,
            },
            data.modality_names(),
            data.t_lens(),
            4,
            5,
            false,
        )
        .unwrap();
        let a = predict(&params, &data, &[0, 1, 2, 3]).unwrap();
        let b = predict(&params, &data, &[2, 0, 3, 1]).unwrap();
        assert_eq!(b, vec![a[2], a[0], a[3], a[1]]);
    }

    #[test]
    fn embeddings_strictly_inside_unit_interval() {
        let data = tiny_dataset(3, 5, 2, 7, 14);
        let params = ModelParams::init(
            ModelKind::Mgcn,
            ModelConfig {
                channels1: 4,
                channels2: 3,
                hidden1: 4,
                hidden2: 3,
            },
            data.modality_names(),
            data.t_lens(),
            5,
            2,
            false,
        )
        .unwrap();
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &[0, 1, 2]).unwrap();
        for &zm in &art.z_modality {
            assert!(tape
                .value(zm)
                .array()
                .iter()
                .all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn identity_propagation_reduces_to_per_node_mlp() {
        // P = I: Z = sigmoid(relu(X Θ0) Θ1)
        let mut data = tiny_dataset(1, 4, 1, 6, 15);
        for s in &mut data.subjects {
            for g in &mut s.graphs {
                g.propagation = Tensor::eye(4);
            }
        }
        let params = ModelParams::init(
            ModelKind::GcnSingle,
            ModelConfig {
                channels1: 3,
                channels2: 2,
                hidden1: 4,
                hidden2: 3,
            },
            vec![data.modalities[0].name.clone()],
            vec![data.modalities[0].t_len],
            4,
            3,
            false,
        )
        .unwrap();
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &[0]).unwrap();
        let z = tape.value(art.z_modality[0]).flatten();
        // oracle: plain matrix chain with ndarray
        let x = data.subjects[0].ts[0].array();
        let t0 = params.get("theta0.0").unwrap().array();
        let t1 = params.get("theta1.0").unwrap().array();
        let h = x.dot(t0).mapv(|v: f64| v.max(0.0));
        let expect: Array2<f64> = h.dot(t1).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let expect: Vec<f64> = expect.iter().copied().collect();
        for (a, b) in z.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_propagate_v0_is_diagonal_propagation() {
        // V = 0 -> M = 0 -> operator = I ⊙ P = diag(P)
        let mut tape = Tape::new();
        let v = tape.param(Tensor::zeros(3, 3));
        let p_mat = Tensor::from_rows(&[
            vec![0.5, 0.2, 0.0],
            vec![0.2, 0.6, 0.1],
            vec![0.0, 0.1, 0.7],
        ])
        .unwrap();
        let p = tape.constant(p_mat.clone());
        let h = tape.constant(Tensor::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap());
        let theta = tape.constant(Tensor::from_rows(&[vec![2.0]]).unwrap());
        let out = masked_propagate(&mut tape, v, p, h, theta, Activation::Linear).unwrap();
        let vals = tape.value(out).flatten();
        assert_eq!(vals, vec![0.5 * 1.0 * 2.0, 0.6 * 2.0 * 2.0, 0.7 * 3.0 * 2.0]);
    }

    #[test]
    fn large_negative_v_clamps_to_zero_mask() {
        let mut tape = Tape::new();
        let mut vneg = Tensor::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                vneg.set(i, j, -1e6);
            }
        }
        let v = tape.param(vneg);
        let vt = tape.transpose(v).unwrap();
        let sym = tape.add(v, vt).unwrap();
        let mask = tape.relu(sym).unwrap();
        assert_eq!(tape.value(mask).max_abs(), 0.0);
    }

    #[test]
    fn mask_symmetric_for_random_v() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let mut v = Tensor::zeros(4, 4);
            for i in 0..4 {
                for j in 0..4 {
                    v.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
            let mut tape = Tape::new();
            let vid = tape.param(v);
            let vt = tape.transpose(vid).unwrap();
            let sym = tape.add(vid, vt).unwrap();
            let mask = tape.relu(sym).unwrap();
            let m = tape.value(mask);
            for i in 0..4 {
                for j in 0..4 {
                    assert_eq!(m.get(i, j), m.get(j, i));
                    assert!(m.get(i, j) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let data = tiny_dataset(2, 4, 2, 6, 16);
        let params = ModelParams::init(
            ModelKind::Mgcn,
            ModelConfig {
                channels1: 3,
                channels2: 2,
                hidden1: 4,
                hidden2: 3,
            },
            data.modality_names(),
            data.t_lens(),
            4,
            99,
            true,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        params.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(params, loaded);
    }
}
