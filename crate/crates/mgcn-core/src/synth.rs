//! Synthetic cohort generation with planted signal.
//!
//! Each subject carries a scalar latent factor u. Community base signals are
//! amplitude-modulated by u (so connectivity similarity tracks latent
//! similarity, the premise behind the manifold penalty), a planted ROI set
//! receives an additional strongly u-scaled shared component, and planted
//! edges receive u-scaled pairwise co-activation. Labels are a linear
//! function of u plus noise.
//!
//! Signal realizations are seeded from (seed, modality, bits of u): two
//! subjects with identical u share base and planted signals and differ only
//! in observation noise, which vanishes as SNR grows.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    save_manifest, write_fn_labels, write_matrix_csv, Dataset, DatasetManifest, ModalityMeta,
    Provenance,
};
use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub q: usize,
    pub modalities: Vec<ModalityMeta>,
    /// Observation noise amplitude is 1/snr.
    pub snr: f64,
    pub planted_rois: usize,
    /// Amplitude of the shared planted-ROI component.
    pub roi_signal: f64,
    pub planted_edges: usize,
    /// Amplitude of per-edge co-activation.
    pub edge_signal: f64,
    pub communities: usize,
    /// Strength of the latent's modulation of community base amplitudes;
    /// 0 makes community structure static across subjects.
    pub community_coupling: f64,
    pub label_scale: f64,
    pub label_noise: f64,
    pub label_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 60,
            q: 32,
            modalities: vec![
                ModalityMeta {
                    name: "emoid".into(),
                    t_len: 50,
                },
                ModalityMeta {
                    name: "nback".into(),
                    t_len: 60,
                },
            ],
            snr: 3.0,
            planted_rois: 4,
            roi_signal: 1.5,
            planted_edges: 20,
            edge_signal: 1.2,
            communities: 4,
            community_coupling: 1.0,
            label_scale: 15.0,
            label_noise: 3.0,
            label_offset: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr <= 0.0 {
            return Err(CoreError::InvalidConfig("snr must be > 0".into()));
        }
        if self.planted_rois > self.q {
            return Err(CoreError::InvalidConfig(format!(
                "planted ROI count {} exceeds Q={}",
                self.planted_rois, self.q
            )));
        }
        let max_edges = self.q * (self.q - 1) / 2;
        if self.planted_edges > max_edges {
            return Err(CoreError::InvalidConfig(format!(
                "planted edge count {} exceeds {} possible",
                self.planted_edges, max_edges
            )));
        }
        if self.communities == 0 || self.communities > self.q {
            return Err(CoreError::InvalidConfig(
                "community count must be in [1, Q]".into(),
            ));
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_series(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generate the in-memory dataset.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let q = config.q;
    let mut setup_rng = stream_rng(config.seed, 1);

    // fixed structure: community assignment, planted ROI set, planted edges
    let mut rois: Vec<usize> = (0..q).collect();
    rois.shuffle(&mut setup_rng);
    let planted_rois: Vec<usize> = {
        let mut r = rois[..config.planted_rois].to_vec();
        r.sort_unstable();
        r
    };
    let mut all_pairs: Vec<(usize, usize)> = (0..q)
        .flat_map(|i| ((i + 1)..q).map(move |j| (i, j)))
        .collect();
    all_pairs.shuffle(&mut setup_rng);
    let mut planted_edges = all_pairs[..config.planted_edges].to_vec();
    planted_edges.sort_unstable();

    let community: Vec<usize> = (0..q).map(|roi| roi * config.communities / q).collect();
    // per-community modulation exponent, spread over [-1, 1]
    let alphas: Vec<f64> = (0..config.communities)
        .map(|k| {
            if config.communities == 1 {
                1.0
            } else {
                -1.0 + 2.0 * k as f64 / (config.communities - 1) as f64
            }
        })
        .collect();

    let mut u_rng = stream_rng(config.seed, 2);
    let latents: Vec<f64> = (0..config.n)
        .map(|_| u_rng.sample(StandardNormal))
        .collect();

    let mut label_rng = stream_rng(config.seed, 3);
    let labels: Vec<f64> = latents
        .iter()
        .map(|&u| {
            let eps: f64 = label_rng.sample(StandardNormal);
            config.label_offset + config.label_scale * u + config.label_noise * eps
        })
        .collect();

    let noise_amp = 1.0 / config.snr;
    let mut ts = Vec::with_capacity(config.n);
    for (subject, &u) in latents.iter().enumerate() {
        let mut per_mod = Vec::with_capacity(config.modalities.len());
        for (m, meta) in config.modalities.iter().enumerate() {
            let t = meta.t_len;
            // realizations keyed by u: equal latents share signals
            let sig_stream = u.to_bits() ^ (m as u64).wrapping_mul(0x9E3779B97F4A7C15);
            let mut sig_rng = stream_rng(config.seed ^ 0x5157_4d41, sig_stream);
            let base: Vec<Vec<f64>> = (0..config.communities)
                .map(|_| normal_series(&mut sig_rng, t))
                .collect();
            let roi_sig = normal_series(&mut sig_rng, t);
            let edge_sigs: Vec<Vec<f64>> = planted_edges
                .iter()
                .map(|_| normal_series(&mut sig_rng, t))
                .collect();

            let noise_stream = (subject as u64) ^ ((m as u64) << 32);
            let mut noise_rng = stream_rng(config.seed ^ 0x4e4f_4953, noise_stream);

            let roi_amp = config.roi_signal * u.exp();
            let edge_amp = config.edge_signal * (0.5 * u).exp();
            let mut x = Tensor::zeros(q, t);
            for roi in 0..q {
                let com_amp = (0.5 * alphas[community[roi]] * config.community_coupling * u).exp();
                let planted = planted_rois.binary_search(&roi).is_ok();
                let edge_hits: Vec<usize> = planted_edges
                    .iter()
                    .enumerate()
                    .filter(|(_, &(a, b))| a == roi || b == roi)
                    .map(|(e, _)| e)
                    .collect();
                for step in 0..t {
                    let mut v = com_amp * base[community[roi]][step];
                    if planted {
                        v += roi_amp * roi_sig[step];
                    }
                    for &e in &edge_hits {
                        v += edge_amp * edge_sigs[e][step];
                    }
                    let eps: f64 = noise_rng.sample(StandardNormal);
                    v += noise_amp * eps;
                    x.set(roi, step, v);
                }
            }
            per_mod.push(x);
        }
        ts.push(per_mod);
    }

    let fn_labels: Vec<String> = community.iter().map(|&k| format!("FN{k:02}")).collect();

    Ok(Dataset {
        modalities: config.modalities.clone(),
        q,
        ts,
        labels,
        fn_labels: Some(fn_labels),
        provenance: Some(Provenance {
            seed: config.seed,
            planted_rois,
            planted_edges,
        }),
    })
}

/// Generate and write manifest + per-subject CSVs + FN labels to `dir`.
pub fn synth_generate_to_dir(config: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let dataset = synth_generate(config)?;
    std::fs::create_dir_all(dir).map_err(|e| CoreError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let mut files = Vec::with_capacity(dataset.n());
    for (subject, mods) in dataset.ts.iter().enumerate() {
        let mut row = Vec::new();
        for (m, ts) in mods.iter().enumerate() {
            let rel = format!("sub{subject:03}_{}.csv", dataset.modalities[m].name);
            write_matrix_csv(&dir.join(&rel), ts)?;
            row.push(rel);
        }
        files.push(row);
    }
    let fn_rel = "fn_labels.csv".to_string();
    write_fn_labels(
        &dir.join(&fn_rel),
        dataset.fn_labels.as_ref().expect("generator emits labels"),
    )?;
    let manifest = DatasetManifest {
        n: dataset.n(),
        q: dataset.q,
        modalities: dataset.modalities.clone(),
        labels: dataset.labels.clone(),
        files,
        fn_labels_file: Some(fn_rel),
        provenance: dataset.provenance.clone(),
    };
    save_manifest(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Spearman rank correlation; the generator self-test metric.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(xs: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..xs.len()).collect();
        idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
        let mut r = vec![0.0; xs.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    let ra = ranks(a);
    let rb = ranks(b);
    crate::tensor::pearson(&ra, &rb).unwrap_or(0.0)
}
