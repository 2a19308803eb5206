//! The nine fusion back-ends behind one train/score interface.
//!
//! Every classifier consumes a [`LabeledMatrix`] with binary labels and
//! produces a [`FusionModel`] whose `score` returns a real value, higher
//! meaning more target-bonafide-like. Trained models are immutable, scoring
//! is deterministic, and each model serializes to the FMD1 binary format
//! with bit-exact scores after reload.

mod forest;
mod gbdt;
mod gmm;
mod kernel;
mod linear;
mod mlp;
mod rff;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytesio::{ByteReader, ByteWriter, ShortRead};
use crate::features::LabeledMatrix;
use crate::matrix::Matrix;

pub use forest::ForestParams;
pub use gbdt::GbdtParams;
pub use gmm::GmmParams;
pub use kernel::{KernelKind, KernelSvmParams};
pub use linear::LinearParams;
pub use mlp::MlpParams;
pub use rff::RffParams;

/// The classifier families available as fusion back-ends.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mlp,
    LogReg,
    SvmLinear,
    SvmRbf,
    SvmPoly,
    RffLogReg,
    Gmm,
    RandomForest,
    Gbdt,
}

impl BackendKind {
    pub const ALL: [BackendKind; 9] = [
        BackendKind::Mlp,
        BackendKind::LogReg,
        BackendKind::SvmLinear,
        BackendKind::SvmRbf,
        BackendKind::SvmPoly,
        BackendKind::RffLogReg,
        BackendKind::Gmm,
        BackendKind::RandomForest,
        BackendKind::Gbdt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::Mlp => "mlp",
            BackendKind::LogReg => "logreg",
            BackendKind::SvmLinear => "svm_linear",
            BackendKind::SvmRbf => "svm_rbf",
            BackendKind::SvmPoly => "svm_poly",
            BackendKind::RffLogReg => "rff_logreg",
            BackendKind::Gmm => "gmm",
            BackendKind::RandomForest => "random_forest",
            BackendKind::Gbdt => "gbdt",
        }
    }

    fn tag(self) -> u16 {
        match self {
            BackendKind::LogReg => 1,
            BackendKind::SvmLinear => 2,
            BackendKind::SvmRbf => 3,
            BackendKind::SvmPoly => 4,
            BackendKind::RffLogReg => 5,
            BackendKind::Gmm => 6,
            BackendKind::RandomForest => 7,
            BackendKind::Gbdt => 8,
            BackendKind::Mlp => 9,
        }
    }

    fn from_tag(tag: u16) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.tag() == tag)
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown backend '{s}'"))
    }
}

/// Hyperparameters for one training run. [`TrainConfig::for_kind`] fills in
/// the per-kind defaults; fields a kind does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: BackendKind,
    pub seed: u64,
    /// Gradient steps, dual update passes, EM iterations, or epochs,
    /// depending on the kind.
    pub max_iterations: usize,
    /// Weight of the (lambda/2)*||w||^2 penalty added to the mean loss.
    pub reg_lambda: f64,
    pub learning_rate: f64,
    /// Convergence tolerance: gradient norm, KKT violation, or
    /// log-likelihood gain, depending on the kind.
    pub tolerance: f64,
    pub degree: u32,
    /// Kernel and Fourier-feature width; `None` means 1/(d * Var(X))
    /// computed from the training matrix.
    pub gamma: Option<f64>,
    pub coef0: f64,
    pub n_components: usize,
    pub covariance_floor: f64,
    pub n_trees: usize,
    pub tree_depth: usize,
    pub l2_leaf_reg: f64,
    pub max_bins: usize,
    pub rff_dim: usize,
    pub pca_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub leaky_slope: f64,
}

/// Utterance count behind the default regularization weight 1/25380.
pub const DEFAULT_REG_DENOM: f64 = 25380.0;

impl TrainConfig {
    pub fn for_kind(kind: BackendKind) -> Self {
        let mut cfg = TrainConfig {
            kind,
            seed: 0,
            max_iterations: 1000,
            reg_lambda: 1.0 / DEFAULT_REG_DENOM,
            learning_rate: 0.1,
            tolerance: 1e-8,
            degree: 7,
            gamma: None,
            coef0: 0.0,
            n_components: 2,
            covariance_floor: 1e-6,
            n_trees: 1000,
            tree_depth: 6,
            l2_leaf_reg: 3.0,
            max_bins: 255,
            rff_dim: 5000,
            pca_dim: 1024,
            layer_sizes: vec![256, 128, 64],
            batch_size: 256,
            momentum: 0.9,
            leaky_slope: 0.3,
        };
        match kind {
            BackendKind::LogReg => {
                cfg.max_iterations = 1000;
                cfg.learning_rate = 1.0;
            }
            BackendKind::SvmLinear => {
                cfg.max_iterations = 50000;
                cfg.learning_rate = 0.5;
            }
            BackendKind::SvmRbf | BackendKind::SvmPoly => {
                cfg.max_iterations = 50000;
                cfg.tolerance = 1e-3;
            }
            BackendKind::RffLogReg => {
                cfg.max_iterations = 1000;
                cfg.learning_rate = 1.0;
            }
            BackendKind::Gmm => {
                cfg.max_iterations = 1000;
                cfg.tolerance = 1e-7;
            }
            BackendKind::RandomForest => {
                cfg.n_trees = 1000;
            }
            BackendKind::Gbdt => {
                cfg.n_trees = 700;
                cfg.learning_rate = 0.03;
            }
            BackendKind::Mlp => {
                cfg.max_iterations = 100;
                cfg.learning_rate = 1e-3;
            }
        }
        cfg
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyData,
    #[error("training data has one class only ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("{class} class has {got} samples, needs at least {needed}")]
    DegenerateClass {
        class: &'static str,
        got: usize,
        needed: usize,
    },
    #[error("non-finite {what} during training at iteration {iteration}")]
    NonFinite { what: &'static str, iteration: usize },
    #[error("non-finite feature value at row {row}, column {column}")]
    NonFiniteFeature { row: usize, column: usize },
    #[error("kernel matrix for {n} samples needs {mib} MiB, above the {limit_mib} MiB cap")]
    KernelTooLarge { n: usize, mib: usize, limit_mib: usize },
    #[error("score input has dim {got}, model expects {expected}")]
    ScoreDimMismatch { expected: usize, got: usize },
    #[error("score input has a non-finite component at index {index}")]
    NonFiniteInput { index: usize },
    #[error("bad config: {message}")]
    BadConfig { message: String },
}

/// Kind-specific trained state.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Linear(LinearParams),
    Kernel(KernelSvmParams),
    Rff(RffParams),
    Gmm(GmmParams),
    Forest(ForestParams),
    Gbdt(GbdtParams),
    Mlp(MlpParams),
}

/// A trained back-end: the config it was trained with, the expected input
/// dimension, the parameters, and a per-iteration objective trace kept for
/// diagnostics (not persisted by FMD1).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: TrainConfig,
    pub feature_dim: usize,
    pub params: ModelParams,
    pub trace: Vec<f64>,
}

impl FusionModel {
    pub fn kind(&self) -> BackendKind {
        self.config.kind
    }

    /// Score one feature vector; higher means more target-bonafide-like.
    pub fn score(&self, x: &[f64]) -> Result<f64, TrainError> {
        if x.len() != self.feature_dim {
            return Err(TrainError::ScoreDimMismatch {
                expected: self.feature_dim,
                got: x.len(),
            });
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteInput { index });
        }
        Ok(match &self.params {
            ModelParams::Linear(p) => p.score(x),
            ModelParams::Kernel(p) => p.score(x),
            ModelParams::Rff(p) => p.score(x),
            ModelParams::Gmm(p) => p.score(x),
            ModelParams::Forest(p) => p.score(x),
            ModelParams::Gbdt(p) => p.score(x),
            ModelParams::Mlp(p) => p.score(x),
        })
    }

    /// Score every row of `xs`, in row order.
    pub fn score_rows(&self, xs: &Matrix) -> Result<Vec<f64>, TrainError> {
        (0..xs.rows()).map(|i| self.score(xs.row(i))).collect()
    }
}

/// Free-function alias for [`FusionModel::score`].
pub fn score(model: &FusionModel, x: &[f64]) -> Result<f64, TrainError> {
    model.score(x)
}

/// Train the back-end selected by `cfg.kind`.
pub fn train(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    match cfg.kind {
        BackendKind::LogReg => train_logreg(data, cfg),
        BackendKind::SvmLinear => train_svm_linear(data, cfg),
        BackendKind::SvmRbf | BackendKind::SvmPoly => train_svm_kernel(data, cfg),
        BackendKind::RffLogReg => train_rff_logreg(data, cfg),
        BackendKind::Gmm => train_gmm_llr(data, cfg),
        BackendKind::RandomForest => train_random_forest(data, cfg),
        BackendKind::Gbdt => train_gbdt(data, cfg),
        BackendKind::Mlp => train_mlp(data, cfg),
    }
}

pub use forest::train_random_forest;
pub use gbdt::train_gbdt;
pub use gmm::{fit_diag_gmm, train_gmm_llr, DiagGmm};
pub use kernel::train_svm_kernel;
pub use linear::{hinge_objective, logistic_objective, train_logreg, train_svm_linear};
pub use mlp::{loss_and_gradient, train_mlp, MlpGradient};
pub use rff::{fourier_features, rbf_kernel, sample_fourier_map, train_rff_logreg};

/// Check shape and finiteness, returning (positive, negative) row indices.
pub(crate) fn validate_binary(data: &LabeledMatrix) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if data.n_rows() == 0 || data.dim() == 0 {
        return Err(TrainError::EmptyData);
    }
    for (row, values) in data.x.iter_rows().enumerate() {
        if let Some(column) = values.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteFeature { row, column });
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &l) in data.labels.iter().enumerate() {
        if l > 0.5 {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(TrainError::SingleClass {
            positives: pos.len(),
            negatives: neg.len(),
        });
    }
    Ok((pos, neg))
}

/// Width fallback 1/(d * Var(X)) over all matrix entries, variance floored.
pub(crate) fn default_gamma(x: &Matrix) -> f64 {
    let n = (x.rows() * x.cols()) as f64;
    let mean: f64 = x.data().iter().sum::<f64>() / n;
    let var: f64 = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    1.0 / (x.cols() as f64 * var.max(1e-12))
}

/// Numerically stable log(1 + exp(z)).
pub(crate) fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Labels as +-1.
pub(crate) fn signed_labels(data: &LabeledMatrix) -> Vec<f64> {
    data.labels.iter().map(|&l| 2.0 * l - 1.0).collect()
}

const FMD1_MAGIC: &[u8; 4] = b"FMD1";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an FMD1 model file")]
    BadMagic,
    #[error("unknown model kind tag {0}")]
    UnknownKind(u16),
    #[error("model file truncated: wanted {wanted} more bytes, {available} available")]
    Truncated { wanted: usize, available: usize },
    #[error("config block is not valid JSON: {0}")]
    BadConfigJson(#[from] serde_json::Error),
    #[error("kind tag '{tag}' disagrees with config kind '{config_kind}'")]
    KindMismatch { tag: String, config_kind: String },
    #[error("model file has {0} trailing bytes")]
    TrailingBytes(usize),
    #[error("invalid parameter block: {0}")]
    BadParams(String),
}

impl From<ShortRead> for ModelIoError {
    fn from(e: ShortRead) -> Self {
        ModelIoError::Truncated {
            wanted: e.wanted,
            available: e.available,
        }
    }
}

/// Serialize a model to FMD1 bytes.
pub fn model_to_bytes(model: &FusionModel) -> Result<Vec<u8>, ModelIoError> {
    let mut w = ByteWriter::new();
    w.put(FMD1_MAGIC);
    w.put_u16(model.kind().tag());
    w.put_u32(model.feature_dim as u32);
    w.put_u64(model.config.seed);
    let config_json = serde_json::to_vec(&model.config)?;
    w.put_u32(config_json.len() as u32);
    w.put(&config_json);

    let mut pw = ByteWriter::new();
    match &model.params {
        ModelParams::Linear(p) => p.write(&mut pw),
        ModelParams::Kernel(p) => p.write(&mut pw),
        ModelParams::Rff(p) => p.write(&mut pw),
        ModelParams::Gmm(p) => p.write(&mut pw),
        ModelParams::Forest(p) => p.write(&mut pw),
        ModelParams::Gbdt(p) => p.write(&mut pw),
        ModelParams::Mlp(p) => p.write(&mut pw),
    }
    let blob = pw.into_bytes();
    w.put_u32(blob.len() as u32);
    w.put(&blob);
    Ok(w.into_bytes())
}

/// Parse a model from FMD1 bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<FusionModel, ModelIoError> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != FMD1_MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let tag = r.read_u16()?;
    let kind = BackendKind::from_tag(tag).ok_or(ModelIoError::UnknownKind(tag))?;
    let feature_dim = r.read_u32()? as usize;
    let seed = r.read_u64()?;
    let config_len = r.read_u32()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)?;
    if config.kind != kind {
        return Err(ModelIoError::KindMismatch {
            tag: kind.to_string(),
            config_kind: config.kind.to_string(),
        });
    }
    if config.seed != seed {
        return Err(ModelIoError::BadParams(format!(
            "seed field {seed} disagrees with config seed {}",
            config.seed
        )));
    }
    let blob_len = r.read_u32()? as usize;
    let blob = r.take(blob_len)?;
    if r.remaining() != 0 {
        return Err(ModelIoError::TrailingBytes(r.remaining()));
    }
    let mut pr = ByteReader::new(blob);
    let params = match kind {
        BackendKind::LogReg | BackendKind::SvmLinear => {
            ModelParams::Linear(LinearParams::read(&mut pr)?)
        }
        BackendKind::SvmRbf | BackendKind::SvmPoly => {
            ModelParams::Kernel(KernelSvmParams::read(&mut pr)?)
        }
        BackendKind::RffLogReg => ModelParams::Rff(RffParams::read(&mut pr)?),
        BackendKind::Gmm => ModelParams::Gmm(GmmParams::read(&mut pr)?),
        BackendKind::RandomForest => ModelParams::Forest(ForestParams::read(&mut pr)?),
        BackendKind::Gbdt => ModelParams::Gbdt(GbdtParams::read(&mut pr)?),
        BackendKind::Mlp => ModelParams::Mlp(MlpParams::read(&mut pr)?),
    };
    if pr.remaining() != 0 {
        return Err(ModelIoError::BadParams(format!(
            "{} unread parameter bytes",
            pr.remaining()
        )));
    }
    Ok(FusionModel {
        config,
        feature_dim,
        params,
        trace: Vec::new(),
    })
}

/// Write a model to an FMD1 file.
pub fn save_model(model: &FusionModel, path: &Path) -> Result<(), ModelIoError> {
    let bytes = model_to_bytes(model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Read a model from an FMD1 file.
pub fn load_model(path: &Path) -> Result<FusionModel, ModelIoError> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}

pub(crate) fn put_f64_slice(w: &mut ByteWriter, v: &[f64]) {
    w.put_u32(v.len() as u32);
    for &x in v {
        w.put_f64(x);
    }
}

pub(crate) fn read_f64_vec(r: &mut ByteReader) -> Result<Vec<f64>, ModelIoError> {
    let len = r.read_u32()? as usize;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(r.read_f64()?);
    }
    Ok(out)
}

pub(crate) fn put_matrix(w: &mut ByteWriter, m: &Matrix) {
    w.put_u32(m.rows() as u32);
    w.put_u32(m.cols() as u32);
    for &x in m.data() {
        w.put_f64(x);
    }
}

pub(crate) fn read_matrix(r: &mut ByteReader) -> Result<Matrix, ModelIoError> {
    let rows = r.read_u32()? as usize;
    let cols = r.read_u32()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(r.read_f64()?);
    }
    Ok(Matrix::from_vec(rows, cols, data))
}
