//! Dataset manifest, on-disk formats, and the in-memory prepared dataset.
//!
//! Time series live in header-free CSV files, one per subject per modality
//! (Q rows x T columns). The manifest is JSON and records labels, file
//! paths, optional functional-network labels, and generator provenance.
//! Floats in emitted CSVs use 17 significant digits so files round-trip.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::{BrainGraph, KnnMode};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModalityMeta {
    pub name: String,
    pub t_len: usize,
}

/// Generator provenance: what signal was planted and where.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub planted_rois: Vec<usize>,
    pub planted_edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    pub q: usize,
    pub modalities: Vec<ModalityMeta>,
    pub labels: Vec<f64>,
    /// files[subject][modality], relative to the manifest's directory.
    pub files: Vec<Vec<String>>,
    pub fn_labels_file: Option<String>,
    pub provenance: Option<Provenance>,
}

/// Raw loaded dataset (time series + labels).
#[derive(Clone, Debug)]
pub struct Dataset {
    pub modalities: Vec<ModalityMeta>,
    pub q: usize,
    /// ts[subject][modality]: Q x T_m.
    pub ts: Vec<Vec<Tensor>>,
    pub labels: Vec<f64>,
    pub fn_labels: Option<Vec<String>>,
    pub provenance: Option<Provenance>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.ts.len()
    }

    /// Build per-subject graphs, producing the model-ready dataset.
    pub fn prepare(&self, k: usize, mode: KnnMode, lenient: bool) -> Result<PreparedDataset> {
        let subjects: Vec<SubjectData> = self
            .ts
            .par_iter()
            .map(|mods| {
                let graphs = mods
                    .iter()
                    .map(|ts| BrainGraph::build(ts, k, mode, lenient))
                    .collect::<Result<Vec<_>>>()?;
                Ok(SubjectData {
                    ts: mods.clone(),
                    graphs,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedDataset {
            modalities: self.modalities.clone(),
            q: self.q,
            subjects,
            labels: self.labels.clone(),
            fn_labels: self.fn_labels.clone(),
            provenance: self.provenance.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SubjectData {
    /// Per-modality Q x T_m time series.
    pub ts: Vec<Tensor>,
    /// Per-modality graphs (dense FC, adjacency, propagation).
    pub graphs: Vec<BrainGraph>,
}

/// Dataset with graphs built; the input to training and interpretation.
#[derive(Clone, Debug)]
pub struct PreparedDataset {
    pub modalities: Vec<ModalityMeta>,
    pub q: usize,
    pub subjects: Vec<SubjectData>,
    pub labels: Vec<f64>,
    pub fn_labels: Option<Vec<String>>,
    pub provenance: Option<Provenance>,
}

impl PreparedDataset {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.modalities.iter().map(|m| m.name.clone()).collect()
    }

    pub fn t_lens(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m.t_len).collect()
    }
}

/// 17-significant-digit float formatting; round-trips any f64.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write bytes via a temp file in the same directory, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CoreError::Io {
        path: dir.display().to_string(),
        source: e,
    })?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().unwrap_or_default().to_string_lossy()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| CoreError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    f.write_all(bytes).map_err(|e| CoreError::Io {
        path: tmp.display().to_string(),
        source: e,
    })?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Header-free CSV matrix writer.
pub fn write_matrix_csv(path: &Path, m: &Tensor) -> Result<()> {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| fmt_f64(m.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

/// Header-free CSV matrix reader with per-cell finiteness checks.
pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (j, cell) in line.split(',').enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("bad number '{}' at row {i}, column {j}", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(CoreError::NonFiniteInput {
                    path: path.display().to_string(),
                    row: i,
                    col: j,
                });
            }
            row.push(v);
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

pub fn save_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest).map_err(|e| CoreError::Parse {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    atomic_write(path, json.as_bytes())
}

/// Load and validate a dataset from its manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| CoreError::Io {
        path: manifest_path.display().to_string(),
        source: e,
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CoreError::Parse {
            path: manifest_path.display().to_string(),
            msg: e.to_string(),
        })?;
    let base: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .to_path_buf();

    if manifest.labels.len() != manifest.n {
        return Err(CoreError::InvalidConfig(format!(
            "manifest declares {} subjects but {} labels",
            manifest.n,
            manifest.labels.len()
        )));
    }
    if manifest.files.len() != manifest.n {
        return Err(CoreError::InvalidConfig(format!(
            "manifest declares {} subjects but {} file rows",
            manifest.n,
            manifest.files.len()
        )));
    }

    let mut ts = Vec::with_capacity(manifest.n);
    for (subject, files) in manifest.files.iter().enumerate() {
        if files.len() != manifest.modalities.len() {
            return Err(CoreError::MissingModality {
                subject,
                modality: format!(
                    "expected {} modalities, found {}",
                    manifest.modalities.len(),
                    files.len()
                ),
            });
        }
        let mut per_mod = Vec::with_capacity(files.len());
        for (m, rel) in files.iter().enumerate() {
            let path = base.join(rel);
            if !path.exists() {
                return Err(CoreError::MissingFile {
                    subject,
                    modality: manifest.modalities[m].name.clone(),
                    path: path.display().to_string(),
                });
            }
            let mat = read_matrix_csv(&path)?;
            let expected = (manifest.q, manifest.modalities[m].t_len);
            if mat.shape() != expected {
                return Err(CoreError::InputShape {
                    path: path.display().to_string(),
                    expected_rows: expected.0,
                    expected_cols: expected.1,
                    rows: mat.rows(),
                    cols: mat.cols(),
                });
            }
            per_mod.push(mat);
        }
        ts.push(per_mod);
    }

    let fn_labels = match &manifest.fn_labels_file {
        Some(rel) => {
            let path = base.join(rel);
            Some(read_fn_labels(&path, manifest.q)?)
        }
        None => None,
    };

    Ok(Dataset {
        modalities: manifest.modalities.clone(),
        q: manifest.q,
        ts,
        labels: manifest.labels.clone(),
        fn_labels,
        provenance: manifest.provenance.clone(),
    })
}

/// ROI -> functional-network label file: `roi,network` per line, no header.
pub fn read_fn_labels(path: &Path, q: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut labels = vec![None; q];
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(2, ',');
        let roi: usize = parts
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("bad ROI index in '{line}'"),
            })?;
        let label = parts
            .next()
            .ok_or_else(|| CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("missing network label in '{line}'"),
            })?
            .trim()
            .to_string();
        if roi >= q {
            return Err(CoreError::Parse {
                path: path.display().to_string(),
                msg: format!("ROI {roi} out of range (Q={q})"),
            });
        }
        labels[roi] = Some(label);
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(roi, l)| l.ok_or(CoreError::UnassignedRoi { roi }))
        .collect()
}

pub fn write_fn_labels(path: &Path, labels: &[String]) -> Result<()> {
    let mut out = String::new();
    for (roi, label) in labels.iter().enumerate() {
        out.push_str(&format!("{roi},{label}\n"));
    }
    atomic_write(path, out.as_bytes())
}
