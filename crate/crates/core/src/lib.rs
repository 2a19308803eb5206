//! Fusion toolkit for spoofing-aware speaker verification.
//!
//! The crate assembles per-trial feature vectors from precomputed ASV and
//! countermeasure embeddings, trains one of nine back-end classifiers from
//! scratch, optionally fuses subsystem scores in a second stage, and
//! evaluates score sets with SV-EER, SPF-EER, and SASV-EER.
//!
//! Modules:
//! - [`protocol`]: trial lists (`enroll test label`) and label keys
//! - [`embstore`]: the EMB1 binary container for embedding vectors
//! - [`features`]: feature assembly, standard scaler, PCA, cosine scoring
//! - [`backends`]: the nine fusion classifiers behind one train/score API
//! - [`metrics`]: EER computation with a brute-force oracle and DET points
//! - [`pipeline`]: embedding-level and score-level fusion experiments
//! - [`vad`]: WAV ingestion, magnitude-based silence trimming, codec hook

pub mod backends;
mod bytesio;
pub mod embstore;
pub mod features;
pub mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod vad;

pub use backends::{train, BackendKind, FusionModel, TrainConfig, TrainError};
pub use embstore::{Embedding, EmbeddingStore, StoreError};
pub use features::{FeatureSpec, LabeledMatrix, PcaModel, ScalerModel};
pub use matrix::Matrix;
pub use metrics::{eer, sasv_metrics, EerReport, ScoreSet};
pub use pipeline::{
    gen_synthetic, run_embedding_fusion, run_score_fusion, PipelineConfig, PipelineError,
    ScoreFusionConfig, SyntheticSpec,
};
pub use protocol::{TrialLabel, TrialList, TrialRecord};
