//! Multi-modal graph convolutional regression with ensemble-manifold
//! regularization and interpretability (node attribution, learned edge
//! masks), plus a synthetic cohort generator for validation.

pub mod data;
pub mod error;
pub mod graph;
pub mod interpret;
pub mod manifold;
pub mod model;
pub mod stats;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{
    load_dataset, save_manifest, Dataset, DatasetManifest, ModalityMeta, PreparedDataset,
    Provenance, SubjectData,
};
pub use error::{CoreError, Result};
pub use graph::{BrainGraph, KnnMode};
pub use interpret::{
    consensus_mask, grad_ram, mask_beta_sweep, mask_frequency, module_allegiance, train_edge_mask,
    AllegianceMatrix, EdgeMaskResult, GradRamMap,
};
pub use manifold::{
    assemble_block, manifold_penalty_pairwise, manifold_penalty_trace, modality_similarity,
    subject_similarity, SimilarityBlock, StackOrder,
};
pub use model::{ForwardArtifacts, ModelConfig, ModelKind, ModelParams};
pub use stats::{mae, mean, paired_ttest, rmse, std_dev};
pub use synth::{synth_generate, synth_generate_to_dir, SynthConfig};
pub use tape::{gradient_check, Gradients, Tape, TensorId};
pub use tensor::Tensor;
pub use train::{
    bootstrap_evaluate, split_dataset, train, EvalReport, ModelReport, ModelSpec, OptimizerKind,
    RepeatMetric, SplitIndices, TrainConfig, TrainOutcome,
};
