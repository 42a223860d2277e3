//! Loss assembly, optimization with early stopping, splitting, and the
//! bootstrap evaluation harness.
//!
//! Training is full-batch. The manifold block S is computed once per split
//! from training-set dense FC matrices and frozen; test subjects never
//! contribute to S, to the training loss, or to label centering.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PreparedDataset;
use crate::error::{CoreError, Result};
use crate::graph::KnnMode;
use crate::manifold::{assemble_block, modality_similarity, SimilarityBlock};
use crate::model::{build_forward, ForwardArtifacts, ModelConfig, ModelKind, ModelParams};
use crate::stats;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent, kept for ablation.
    Sgd,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Early-stop patience, in epochs without validation improvement.
    pub patience: usize,
    pub l2: f64,
    /// Between-modality manifold weight.
    pub eta1: f64,
    /// Within-modality manifold weight.
    pub eta2: f64,
    pub knn_k: usize,
    pub knn_mode: KnnMode,
    pub lenient_fc: bool,
    pub model: ModelConfig,
    pub split: (f64, f64, f64),
    pub seed: u64,
    pub repeats: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            max_epochs: 1000,
            patience: 50,
            l2: 1e-4,
            eta1: 1e-3,
            eta2: 1e-3,
            knn_k: 10,
            knn_mode: KnnMode::Union,
            lenient_fc: false,
            model: ModelConfig::default(),
            split: (0.7, 0.1, 0.2),
            seed: 0,
            repeats: 10,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (a, b, c) = self.split;
        if (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CoreError::BadSplitRatios(self.split));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("l2", self.l2),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
        ] {
            if v < 0.0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Disjoint, exhaustive index sets. Sizes: floor(ratio*N) for validation and
/// test, remainder to train.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_dataset(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    if n < 3 {
        return Err(CoreError::DatasetTooSmall { n });
    }
    let (a, b, c) = ratios;
    if (a + b + c - 1.0).abs() > 1e-9 {
        return Err(CoreError::BadSplitRatios(ratios));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let n_val = (b * n as f64).floor() as usize;
    let n_test = (c * n as f64).floor() as usize;
    let n_train = n - n_val - n_test;
    Ok(SplitIndices {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
    })
}

/// Attach the full loss to an existing forward pass:
/// MSE + trace(Z^T L Z) + l2 * sum ||W||_F^2 (+ beta * ||M||_1 in mask mode).
pub fn build_loss(
    tape: &mut Tape,
    art: &ForwardArtifacts,
    params: &ModelParams,
    centered_labels: &[f64],
    laplacian: Option<&Tensor>,
    l2: f64,
    beta: Option<f64>,
) -> Result<TensorId> {
    let y = tape.constant(Tensor::column(centered_labels)?);
    let mut loss = tape.mse(art.yhat, y)?;

    if let Some(l_mat) = laplacian {
        let z_stack = art.z_stack.ok_or(CoreError::InvalidConfig(
            "manifold penalty requires encoder embeddings".into(),
        ))?;
        let l_const = tape.constant(l_mat.clone());
        let lz = tape.matmul(l_const, z_stack)?;
        let zlz = tape.hadamard(z_stack, lz)?;
        let penalty = tape.sum(zlz)?;
        loss = tape.add(loss, penalty)?;
    }

    if l2 > 0.0 {
        let mut acc: Option<TensorId> = None;
        for (pi, leaf) in &art.leaves {
            if !params.params[*pi].decay {
                continue;
            }
            let sq = tape.sq_frobenius(*leaf)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, sq)?,
                None => sq,
            });
        }
        if let Some(a) = acc {
            let scaled = tape.scale(a, l2)?;
            loss = tape.add(loss, scaled)?;
        }
    }

    if let Some(beta) = beta {
        let mask = art.mask.ok_or(CoreError::InvalidConfig(
            "beta given but model has no mask".into(),
        ))?;
        if beta > 0.0 {
            let l1 = tape.l1_norm(mask)?;
            let scaled = tape.scale(l1, beta)?;
            loss = tape.add(loss, scaled)?;
        }
    }
    Ok(loss)
}

struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params
            .params
            .iter()
            .map(|p| Tensor::zeros(p.tensor.rows(), p.tensor.cols()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (i, p) in params.params.iter_mut().enumerate() {
            let g = grads[i].array();
            let m = self.m[i].array_mut();
            let v = self.v[i].array_mut();
            m.zip_mut_with(g, |mi, &gi| *mi = Self::BETA1 * *mi + (1.0 - Self::BETA1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = Self::BETA2 * *vi + (1.0 - Self::BETA2) * gi * gi);
            let w = p.tensor.array_mut();
            ndarray::Zip::from(w).and(&*m).and(&*v).for_each(|wi, &mi, &vi| {
                *wi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + Self::EPS);
            });
        }
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    /// RMSE on the validation set (train loss when no validation split).
    pub val_metric: f64,
    pub secs: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<EpochStat>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
}

/// Build the frozen manifold block for the model's modalities over the
/// training subjects.
pub fn training_similarity(
    data: &PreparedDataset,
    modalities: &[String],
    train_idx: &[usize],
    eta1: f64,
    eta2: f64,
) -> Result<SimilarityBlock> {
    let per_modality: Vec<Tensor> = modalities
        .iter()
        .map(|name| {
            let m = data
                .modality_index(name)
                .ok_or_else(|| CoreError::MissingModality {
                    subject: 0,
                    modality: name.clone(),
                })?;
            let fcs: Vec<Tensor> = train_idx
                .iter()
                .map(|&n| data.subjects[n].graphs[m].dense_fc.clone())
                .collect();
            modality_similarity(&fcs)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble_block(&per_modality, eta1, eta2)
}

/// Train one model. `val_idx` may be empty (e.g. mask retraining on all
/// subjects); early stopping then watches the training loss. Deterministic
/// given `init_seed`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    data: &PreparedDataset,
    kind: ModelKind,
    modalities: &[String],
    config: &TrainConfig,
    train_idx: &[usize],
    val_idx: &[usize],
    mask_beta: Option<f64>,
    init_seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_idx.is_empty() {
        return Err(CoreError::DatasetTooSmall { n: 0 });
    }
    let t_lens: Vec<usize> = modalities
        .iter()
        .map(|name| {
            data.modality_index(name)
                .map(|m| data.modalities[m].t_len)
                .ok_or_else(|| CoreError::MissingModality {
                    subject: 0,
                    modality: name.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;

    let train_mean =
        train_idx.iter().map(|&i| data.labels[i]).sum::<f64>() / train_idx.len() as f64;
    let y_train: Vec<f64> = train_idx.iter().map(|&i| data.labels[i] - train_mean).collect();
    let y_val: Vec<f64> = val_idx.iter().map(|&i| data.labels[i] - train_mean).collect();

    let use_manifold = kind.uses_manifold() && (config.eta1 > 0.0 || config.eta2 > 0.0);
    let laplacian = if use_manifold {
        Some(
            training_similarity(data, modalities, train_idx, config.eta1, config.eta2)?
                .laplacian,
        )
    } else {
        None
    };

    let mut params = ModelParams::init(
        kind,
        config.model,
        modalities.to_vec(),
        t_lens,
        data.q,
        init_seed,
        mask_beta.is_some(),
    )?;

    let mut adam = match config.optimizer {
        OptimizerKind::Adam => Some(Adam::new(&params)),
        OptimizerKind::Sgd => None,
    };

    let mut curve = Vec::new();
    let mut best_params = params.clone();
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;

    for epoch in 0..config.max_epochs {
        let started = Instant::now();
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, data, train_idx)
            .map_err(|e| diverged(e, epoch))?;
        let loss_id = build_loss(
            &mut tape,
            &art,
            &params,
            &y_train,
            laplacian.as_ref(),
            config.l2,
            mask_beta,
        )
        .map_err(|e| diverged(e, epoch))?;
        let train_loss = tape.value(loss_id).scalar();
        if !train_loss.is_finite() {
            return Err(CoreError::Diverged { epoch });
        }
        let grads_all = tape.backward(loss_id).map_err(|e| diverged(e, epoch))?;
        let grads: Vec<Tensor> = art
            .leaves
            .iter()
            .map(|(pi, leaf)| grads_all.get(*leaf, params.params[*pi].tensor.shape()))
            .collect();

        match &mut adam {
            Some(adam) => adam.step(&mut params, &grads, config.learning_rate),
            None => {
                for (i, p) in params.params.iter_mut().enumerate() {
                    let g = grads[i].array();
                    p.tensor
                        .array_mut()
                        .zip_mut_with(g, |w, &gi| *w -= config.learning_rate * gi);
                }
            }
        }

        let val_metric = if val_idx.is_empty() {
            train_loss
        } else {
            let pred = crate::model::predict(&params, data, val_idx)
                .map_err(|e| diverged(e, epoch))?;
            stats::rmse(&pred, &y_val)
        };
        curve.push(EpochStat {
            epoch,
            train_loss,
            val_metric,
            secs: started.elapsed().as_secs_f64(),
        });
        if val_metric < best_metric {
            best_metric = val_metric;
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    if curve.is_empty() {
        // zero-epoch contract: return the initialization
        best_params = params;
        best_metric = f64::INFINITY;
    }
    Ok(TrainOutcome {
        params: best_params,
        curve,
        best_epoch,
        best_val_metric: best_metric,
    })
}

fn diverged(e: CoreError, epoch: usize) -> CoreError {
    match e {
        CoreError::NonFinite { .. } => CoreError::Diverged { epoch },
        other => other,
    }
}

/// Model selection for the comparison harness.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub kind: ModelKind,
    /// Modalities the model consumes (dataset names).
    pub modalities: Vec<String>,
}

impl ModelSpec {
    /// Parse `mgcn`, `mgcn-noreg`, `gcn:<modality>`, `mlp`, `mvgcn`.
    pub fn parse(s: &str, all_modalities: &[String]) -> Result<Self> {
        let spec = match s {
            "mgcn" => ModelSpec {
                name: s.into(),
                kind: ModelKind::Mgcn,
                modalities: all_modalities.to_vec(),
            },
            "mgcn-noreg" => ModelSpec {
                name: s.into(),
                kind: ModelKind::MgcnNoReg,
                modalities: all_modalities.to_vec(),
            },
            "mlp" => ModelSpec {
                name: s.into(),
                kind: ModelKind::Mlp,
                modalities: all_modalities.to_vec(),
            },
            "mvgcn" => ModelSpec {
                name: s.into(),
                kind: ModelKind::Mvgcn,
                modalities: all_modalities.to_vec(),
            },
            other => match other.strip_prefix("gcn:") {
                Some(modality) if all_modalities.iter().any(|m| m == modality) => ModelSpec {
                    name: other.into(),
                    kind: ModelKind::GcnSingle,
                    modalities: vec![modality.to_string()],
                },
                _ => {
                    return Err(CoreError::InvalidConfig(format!(
                        "unknown model spec '{s}' (modalities: {all_modalities:?})"
                    )))
                }
            },
        };
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RepeatMetric {
    pub repeat: usize,
    pub rmse: f64,
    pub mae: f64,
    pub secs_per_epoch: f64,
    pub epochs: usize,
    /// Set when the repeat diverged; metrics are NaN-free because failed
    /// repeats are recorded here instead of contributing numbers.
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub per_repeat: Vec<RepeatMetric>,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
    /// Paired t-test p-values vs the first model in the report.
    pub p_rmse_vs_first: Option<f64>,
    pub p_mae_vs_first: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub repeats: usize,
    pub models: Vec<ModelReport>,
}

/// Bootstrap comparison: fresh split per repeat (seeded from the master
/// seed), each model trained and scored on the held-out test set. Repeats
/// run concurrently.
pub fn bootstrap_evaluate(
    data: &PreparedDataset,
    config: &TrainConfig,
    models: &[ModelSpec],
) -> Result<EvalReport> {
    config.validate()?;
    let repeats = config.repeats.max(1);
    let runs: Vec<Vec<RepeatMetric>> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let repeat_seed = config.seed.wrapping_add(r as u64);
            let split = split_dataset(data.n(), config.split, repeat_seed)?;
            let train_mean = split
                .train
                .iter()
                .map(|&i| data.labels[i])
                .sum::<f64>()
                / split.train.len() as f64;
            let y_test: Vec<f64> = split
                .test
                .iter()
                .map(|&i| data.labels[i] - train_mean)
                .collect();
            let metrics: Vec<RepeatMetric> = models
                .iter()
                .map(|spec| {
                    let outcome = train(
                        data,
                        spec.kind.clone(),
                        &spec.modalities,
                        config,
                        &split.train,
                        &split.val,
                        None,
                        repeat_seed,
                    );
                    match outcome.and_then(|o| {
                        let pred = crate::model::predict(&o.params, data, &split.test)?;
                        Ok((o, pred))
                    }) {
                        Ok((o, pred)) => RepeatMetric {
                            repeat: r,
                            rmse: stats::rmse(&pred, &y_test),
                            mae: stats::mae(&pred, &y_test),
                            secs_per_epoch: if o.curve.is_empty() {
                                0.0
                            } else {
                                stats::mean(
                                    &o.curve.iter().map(|e| e.secs).collect::<Vec<_>>(),
                                )
                            },
                            epochs: o.curve.len(),
                            error: None,
                        },
                        Err(e) => RepeatMetric {
                            repeat: r,
                            rmse: f64::NAN,
                            mae: f64::NAN,
                            secs_per_epoch: 0.0,
                            epochs: 0,
                            error: Some(e.to_string()),
                        },
                    }
                })
                .collect();
            Ok(metrics)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut models_out = Vec::new();
    for (mi, spec) in models.iter().enumerate() {
        let per_repeat: Vec<RepeatMetric> = runs.iter().map(|r| r[mi].clone()).collect();
        let ok: Vec<&RepeatMetric> = per_repeat.iter().filter(|m| m.error.is_none()).collect();
        let rmses: Vec<f64> = ok.iter().map(|m| m.rmse).collect();
        let maes: Vec<f64> = ok.iter().map(|m| m.mae).collect();
        let (p_rmse, p_mae) = if mi == 0 {
            (None, None)
        } else {
            let first_ok: Vec<usize> = runs
                .iter()
                .enumerate()
                .filter(|(_, r)| r[0].error.is_none() && r[mi].error.is_none())
                .map(|(i, _)| i)
                .collect();
            if first_ok.len() >= 2 {
                let a: Vec<f64> = first_ok.iter().map(|&i| runs[i][0].rmse).collect();
                let b: Vec<f64> = first_ok.iter().map(|&i| runs[i][mi].rmse).collect();
                let am: Vec<f64> = first_ok.iter().map(|&i| runs[i][0].mae).collect();
                let bm: Vec<f64> = first_ok.iter().map(|&i| runs[i][mi].mae).collect();
                (
                    Some(stats::paired_ttest(&a, &b).1),
                    Some(stats::paired_ttest(&am, &bm).1),
                )
            } else {
                (None, None)
            }
        };
        models_out.push(ModelReport {
            name: spec.name.clone(),
            per_repeat,
            rmse_mean: if rmses.is_empty() { f64::NAN } else { stats::mean(&rmses) },
            rmse_std: stats::std_dev(&rmses),
            mae_mean: if maes.is_empty() { f64::NAN } else { stats::mean(&maes) },
            mae_std: stats::std_dev(&maes),
            p_rmse_vs_first: p_rmse,
            p_mae_vs_first: p_mae,
        });
    }
    Ok(EvalReport {
        repeats,
        models: models_out,
    })
}

impl EvalReport {
    /// Per-repeat rows: model,repeat,rmse,mae,secs_per_epoch,epochs,error
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,repeat,rmse,mae,secs_per_epoch,epochs,error\n");
        for m in &self.models {
            for r in &m.per_repeat {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    m.name,
                    r.repeat,
                    crate::data::fmt_f64(r.rmse),
                    crate::data::fmt_f64(r.mae),
                    crate::data::fmt_f64(r.secs_per_epoch),
                    r.epochs,
                    r.error.clone().unwrap_or_default()
                ));
            }
        }
        out
    }
}

/// Training-curve CSV: epoch,train_loss,val_metric,secs
pub fn curve_to_csv(curve: &[EpochStat]) -> String {
    let mut out = String::from("epoch,train_loss,val_metric,secs\n");
    for e in curve {
        out.push_str(&format!(
            "{},{},{},{}\n",
            e.epoch,
            crate::data::fmt_f64(e.train_loss),
            crate::data::fmt_f64(e.val_metric),
            crate::data::fmt_f64(e.secs)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::tiny_dataset;

    fn small_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            max_epochs: 5,
            patience: 10,
            l2: 1e-4,
            eta1: 1e-3,
            eta2: 1e-3,
            knn_k: 2,
            model: ModelConfig {
                channels1: 4,
                channels2: 2,
                hidden1: 6,
                hidden2: 4,
            },
            seed: 7,
            repeats: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_exact_ratios() {
        let s = split_dataset(10, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_rounding_rule_floors_val_and_test() {
        // N=9: floor(0.9)=0 val, floor(1.8)=1 test, remainder 8 to train
        let s = split_dataset(9, (0.7, 0.1, 0.2), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 0, 1));
    }

    #[test]
    fn split_deterministic() {
        assert_eq!(
            split_dataset(20, (0.7, 0.1, 0.2), 5).unwrap(),
            split_dataset(20, (0.7, 0.1, 0.2), 5).unwrap()
        );
    }

    #[test]
    fn split_too_small_errors() {
        assert!(split_dataset(2, (0.7, 0.1, 0.2), 0).is_err());
    }

    #[test]
    fn hand_mse_loss() {
        // yhat - y = (1,-1), all weights zero -> loss = MSE = 1
        let data = tiny_dataset(2, 4, 1, 6, 3);
        let mut params = ModelParams::init(
            ModelKind::GcnSingle,
            small_config().model,
            vec!["mod0".into()],
            vec![6],
            4,
            1,
            false,
        )
        .unwrap();
        for p in &mut params.params {
            p.tensor = Tensor::zeros(p.tensor.rows(), p.tensor.cols());
        }
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &[0, 1]).unwrap();
        let loss = build_loss(&mut tape, &art, &params, &[-1.0, 1.0], None, 0.0, None).unwrap();
        assert!((tape.value(loss).scalar() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn composite_loss_equals_sum_of_terms() {
        let data = tiny_dataset(3, 4, 2, 6, 4);
        let cfg = small_config();
        let modalities = data.modality_names();
        let params = ModelParams::init(
            ModelKind::Mgcn,
            cfg.model,
            modalities.clone(),
            data.t_lens(),
            4,
            9,
            false,
        )
        .unwrap();
        let train_idx = [0usize, 1, 2];
        let y = [0.2, -0.4, 0.1];
        let block = training_similarity(&data, &modalities, &train_idx, 0.7, 1.3).unwrap();

        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &train_idx).unwrap();
        let loss = build_loss(
            &mut tape,
            &art,
            &params,
            &y,
            Some(&block.laplacian),
            0.01,
            None,
        )
        .unwrap();
        let total = tape.value(loss).scalar();

        // independent terms
        let pred = crate::model::predict(&params, &data, &train_idx).unwrap();
        let mse: f64 =
            pred.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 3.0;
        let z_stack = tape.value(art.z_stack.unwrap());
        let lz = block.laplacian.array().dot(z_stack.array());
        let trace_term = (z_stack.array() * &lz).sum();
        let l2_term: f64 = 0.01
            * params
                .params
                .iter()
                .filter(|p| p.decay)
                .map(|p| p.tensor.array().mapv(|v| v * v).sum())
                .sum::<f64>();
        assert!(
            (total - (mse + trace_term + l2_term)).abs() < 1e-9,
            "{total} vs {}",
            mse + trace_term + l2_term
        );
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let data = tiny_dataset(4, 4, 1, 6, 5);
        let mut cfg = small_config();
        cfg.max_epochs = 0;
        let out = train(
            &data,
            ModelKind::GcnSingle,
            &["mod0".into()],
            &cfg,
            &[0, 1, 2],
            &[3],
            None,
            42,
        )
        .unwrap();
        let init = ModelParams::init(
            ModelKind::GcnSingle,
            cfg.model,
            vec!["mod0".into()],
            vec![6],
            4,
            42,
            false,
        )
        .unwrap();
        assert_eq!(out.params, init);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let data = tiny_dataset(6, 4, 2, 6, 6);
        let cfg = small_config();
        let mods = data.modality_names();
        let run = || {
            train(
                &data,
                ModelKind::Mgcn,
                &mods,
                &cfg,
                &[0, 1, 2, 3],
                &[4, 5],
                None,
                11,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.params, b.params);
        let la: Vec<f64> = a.curve.iter().map(|e| e.train_loss).collect();
        let lb: Vec<f64> = b.curve.iter().map(|e| e.train_loss).collect();
        assert_eq!(la, lb); // bit-for-bit
    }

    #[test]
    fn early_stop_returns_best_validation_params() {
        let data = tiny_dataset(8, 4, 1, 8, 7);
        let mut cfg = small_config();
        cfg.max_epochs = 30;
        cfg.patience = 5;
        let out = train(
            &data,
            ModelKind::GcnSingle,
            &["mod0".into()],
            &cfg,
            &[0, 1, 2, 3, 4],
            &[5, 6, 7],
            None,
            3,
        )
        .unwrap();
        let best_recorded = out
            .curve
            .iter()
            .map(|e| e.val_metric)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_metric, best_recorded);
    }

    #[test]
    fn lr_zero_changes_nothing_under_sgd() {
        let data = tiny_dataset(4, 4, 1, 6, 8);
        let mut cfg = small_config();
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.learning_rate = 0.0;
        cfg.max_epochs = 1;
        let out = train(
            &data,
            ModelKind::GcnSingle,
            &["mod0".into()],
            &cfg,
            &[0, 1, 2],
            &[3],
            None,
            13,
        )
        .unwrap();
        let init = ModelParams::init(
            ModelKind::GcnSingle,
            cfg.model,
            vec!["mod0".into()],
            vec![6],
            4,
            13,
            false,
        )
        .unwrap();
        assert_eq!(out.params, init);
    }

    #[test]
    fn manifold_only_loss_moves_encoder_weights() {
        // gradient of the trace penalty must reach Θ through Z
        let data = tiny_dataset(4, 4, 2, 6, 9);
        let mods = data.modality_names();
        let params = ModelParams::init(
            ModelKind::Mgcn,
            small_config().model,
            mods.clone(),
            data.t_lens(),
            4,
            17,
            false,
        )
        .unwrap();
        let idx = [0usize, 1, 2, 3];
        let block = training_similarity(&data, &mods, &idx, 1.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let art = build_forward(&mut tape, &params, &data, &idx).unwrap();
        let z_stack = art.z_stack.unwrap();
        let l_const = tape.constant(block.laplacian.clone());
        let lz = tape.matmul(l_const, z_stack).unwrap();
        let zlz = tape.hadamard(z_stack, lz).unwrap();
        let loss = tape.sum(zlz).unwrap();
        let grads = tape.backward(loss).unwrap();
        let theta0_idx = params.params.iter().position(|p| p.name == "theta0.0").unwrap();
        let g = grads.get(art.leaves[theta0_idx].1, params.params[theta0_idx].tensor.shape());
        assert!(g.max_abs() > 0.0);
    }

    #[test]
    fn bootstrap_identical_seeds_zero_std() {
        let data = tiny_dataset(8, 4, 1, 6, 10);
        let mut cfg = small_config();
        cfg.max_epochs = 2;
        cfg.repeats = 1;
        let spec = ModelSpec::parse("gcn:mod0", &data.modality_names()).unwrap();
        let r1 = bootstrap_evaluate(&data, &cfg, &[spec.clone()]).unwrap();
        let r2 = bootstrap_evaluate(&data, &cfg, &[spec]).unwrap();
        assert_eq!(r1.models[0].rmse_mean, r2.models[0].rmse_mean);
        assert_eq!(r1.models[0].rmse_std, 0.0);
    }

    #[test]
    fn rmse_at_least_mae_in_reports() {
        let data = tiny_dataset(10, 4, 1, 6, 11);
        let mut cfg = small_config();
        cfg.max_epochs = 2;
        cfg.repeats = 2;
        let spec = ModelSpec::parse("gcn:mod0", &data.modality_names()).unwrap();
        let report = bootstrap_evaluate(&data, &cfg, &[spec]).unwrap();
        for r in &report.models[0].per_repeat {
            assert!(r.rmse >= r.mae);
        }
    }

    #[test]
    fn model_spec_parsing() {
        let mods = vec!["emoid".to_string(), "nback".to_string()];
        assert_eq!(ModelSpec::parse("mgcn", &mods).unwrap().kind, ModelKind::Mgcn);
        let g = ModelSpec::parse("gcn:nback", &mods).unwrap();
        assert_eq!(g.modalities, vec!["nback".to_string()]);
        assert!(ModelSpec::parse("gcn:missing", &mods).is_err());
        assert!(ModelSpec::parse("bogus", &mods).is_err());
    }
}
