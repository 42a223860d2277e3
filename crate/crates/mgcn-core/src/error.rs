use thiserror::Error;

/// Errors produced by the core pipeline.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("ROI {roi} has zero variance time series")]
    ZeroVariance { roi: usize },

    #[error("zero variance in vectorized connectivity input")]
    ZeroVarianceSimilarity,

    #[error("K={k} out of range for {q} nodes (need 1 <= K <= Q-1)")]
    KnnRange { k: usize, q: usize },

    #[error("inconsistent subject count across modalities: {0:?}")]
    InconsistentSubjects(Vec<usize>),

    #[error("embedding stack ordering mismatch: expected {expected_m} modalities x {expected_n} subjects, got {got_m} x {got_n}")]
    StackOrderMismatch {
        expected_m: usize,
        expected_n: usize,
        got_m: usize,
        got_n: usize,
    },

    #[error("subject {subject} is missing modality '{modality}'")]
    MissingModality { subject: usize, modality: String },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("dataset too small: N={n}, need at least 3")]
    DatasetTooSmall { n: usize },

    #[error("split ratios {0:?} do not sum to 1")]
    BadSplitRatios((f64, f64, f64)),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("ROI {roi} has no functional-network assignment")]
    UnassignedRoi { roi: usize },

    #[error("mask shape mismatch: expected {expected}x{expected}, got {rows}x{cols}")]
    MaskShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },

    #[error("missing file for subject {subject}, modality '{modality}': {path}")]
    MissingFile {
        subject: usize,
        modality: String,
        path: String,
    },

    #[error("non-finite value in {path} at row {row}, column {col}")]
    NonFiniteInput {
        path: String,
        row: usize,
        col: usize,
    },

    #[error("{path}: expected {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    InputShape {
        path: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {msg}")]
    Parse { path: String, msg: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
