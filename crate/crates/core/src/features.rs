//! Per-trial feature assembly plus standardization, PCA, and cosine scoring.
//!
//! A [`FeatureSpec`] names which embedding stores contribute to the
//! concatenated feature vector, in which order, and whether each part is
//! keyed by the trial's enrollment or test identifier.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::EmbeddingStore;
use crate::matrix::{self, Matrix};
use crate::protocol::{TrialLabel, TrialList, TrialRecord};

/// Whether a feature part is looked up by the enrollment or test identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyRole {
    Enroll,
    Test,
}

/// One slice of the concatenated feature vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturePart {
    /// Store name, resolved against the pipeline's store map.
    pub store: String,
    /// Which trial identifier keys the lookup.
    pub role: KeyRole,
    /// Expected dimension; checked against the store at assembly time.
    pub expected_dim: usize,
}

/// Ordered concatenation recipe.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub parts: Vec<FeaturePart>,
}

impl FeatureSpec {
    pub fn new(parts: Vec<FeaturePart>) -> Result<Self, FeatureError> {
        if parts.is_empty() {
            return Err(FeatureError::EmptySpec);
        }
        let mut seen = std::collections::HashSet::new();
        for p in &parts {
            if !seen.insert((p.store.clone(), p.role)) {
                return Err(FeatureError::DuplicatePart {
                    store: p.store.clone(),
                });
            }
        }
        Ok(Self { parts })
    }

    /// Sum of the parts' expected dimensions.
    pub fn total_dim(&self) -> usize {
        self.parts.iter().map(|p| p.expected_dim).sum()
    }
}

/// Training matrix with binary labels and the trials each row came from.
#[derive(Debug, Clone)]
pub struct LabeledMatrix {
    pub x: Matrix,
    /// 1.0 for positives, 0.0 for negatives.
    pub labels: Vec<f64>,
    pub trial_refs: Vec<TrialRecord>,
}

impl LabeledMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0.5).count()
    }
}

/// Which trial labels count as the positive class when building training
/// labels. The default, `{Target}`, makes the fused system a one-score
/// detector of "same speaker AND bonafide".
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRule {
    pub positive: Vec<TrialLabel>,
}

impl Default for LabelRule {
    fn default() -> Self {
        Self {
            positive: vec![TrialLabel::Target],
        }
    }
}

impl LabelRule {
    pub fn matches(&self, label: TrialLabel) -> bool {
        self.positive.contains(&label)
    }
}

/// Errors raised by assembly and the fitted transforms.
#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("feature spec has no parts")]
    EmptySpec,
    #[error("feature spec names store '{store}' twice for the same role")]
    DuplicatePart { store: String },
    #[error("trial ({enroll_id}, {test_id}): store '{store}' is not configured")]
    MissingStore {
        enroll_id: String,
        test_id: String,
        store: String,
    },
    #[error("trial ({enroll_id}, {test_id}): id '{id}' not found in store '{store}'")]
    MissingKey {
        enroll_id: String,
        test_id: String,
        store: String,
        id: String,
    },
    #[error("trial ({enroll_id}, {test_id}): part '{store}' expects dim {expected} but store holds dim {got}")]
    PartDimMismatch {
        enroll_id: String,
        test_id: String,
        store: String,
        expected: usize,
        got: usize,
    },
    #[error("trial {index}: {source}")]
    AtTrial {
        index: usize,
        source: Box<FeatureError>,
    },
    #[error("empty matrix")]
    EmptyMatrix,
    #[error("pca: k={k} out of range, must satisfy 1 <= k <= min(n, d) = {max_k}")]
    PcaKOutOfRange { k: usize, max_k: usize },
    #[error("cosine: zero-norm input")]
    ZeroNorm,
    #[error("cosine: dimension mismatch ({a} vs {b})")]
    CosineDimMismatch { a: usize, b: usize },
}

/// Concatenate the spec's parts for one trial, in spec order.
pub fn assemble_trial(
    trial: &TrialRecord,
    stores: &HashMap<String, EmbeddingStore>,
    spec: &FeatureSpec,
) -> Result<Vec<f64>, FeatureError> {
    let mut out = Vec::with_capacity(spec.total_dim());
    for part in &spec.parts {
        let store = stores.get(&part.store).ok_or_else(|| FeatureError::MissingStore {
            enroll_id: trial.enroll_id.clone(),
            test_id: trial.test_id.clone(),
            store: part.store.clone(),
        })?;
        if store.dim() != part.expected_dim {
            return Err(FeatureError::PartDimMismatch {
                enroll_id: trial.enroll_id.clone(),
                test_id: trial.test_id.clone(),
                store: part.store.clone(),
                expected: part.expected_dim,
                got: store.dim(),
            });
        }
        let key = match part.role {
            KeyRole::Enroll => &trial.enroll_id,
            KeyRole::Test => &trial.test_id,
        };
        let emb = store.get(key).map_err(|_| FeatureError::MissingKey {
            enroll_id: trial.enroll_id.clone(),
            test_id: trial.test_id.clone(),
            store: part.store.clone(),
            id: key.clone(),
        })?;
        out.extend(emb.values.iter().map(|&v| v as f64));
    }
    Ok(out)
}

/// Assemble a labeled training matrix, one row per trial in trial order.
pub fn assemble_dataset(
    trials: &TrialList,
    stores: &HashMap<String, EmbeddingStore>,
    spec: &FeatureSpec,
    positive_rule: &LabelRule,
) -> Result<LabeledMatrix, FeatureError> {
    let d = spec.total_dim();
    let mut x = Matrix::zeros(trials.len(), d);
    let mut labels = Vec::with_capacity(trials.len());
    let mut refs = Vec::with_capacity(trials.len());
    for (index, trial) in trials.iter().enumerate() {
        let row = assemble_trial(trial, stores, spec).map_err(|source| FeatureError::AtTrial {
            index,
            source: Box::new(source),
        })?;
        x.row_mut(index).copy_from_slice(&row);
        labels.push(if positive_rule.matches(trial.label) { 1.0 } else { 0.0 });
        refs.push(trial.clone());
    }
    Ok(LabeledMatrix {
        x,
        labels,
        trial_refs: refs,
    })
}

/// Stddev floor; constant columns standardize to zero.
pub const SCALER_STD_FLOOR: f64 = 1e-12;

/// Per-column standardization fitted with population (1/n) statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerModel {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

/// Fit a standard scaler on the rows of `x`.
pub fn fit_scaler(x: &Matrix) -> Result<ScalerModel, FeatureError> {
    let n = x.rows();
    if n == 0 || x.cols() == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let d = x.cols();
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        matrix::axpy(&mut mean, 1.0, row);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for row in x.iter_rows() {
        for (j, &v) in row.iter().enumerate() {
            let c = v - mean[j];
            var[j] += c * c;
        }
    }
    let stddev = var
        .iter()
        .map(|&v| (v / n as f64).sqrt().max(SCALER_STD_FLOOR))
        .collect();
    Ok(ScalerModel { mean, stddev })
}

/// Apply a fitted scaler: per column, `(x - mean) / stddev`.
pub fn apply_scaler(model: &ScalerModel, x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        for j in 0..row.len() {
            row[j] = (row[j] - model.mean[j]) / model.stddev[j];
        }
    }
    out
}

impl ScalerModel {
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.stddev))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }
}

/// Linear PCA: projection onto the top-k eigenvectors of the sample
/// covariance of the centered data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k x d, one orthonormal component per row, non-increasing variance.
    pub components: Matrix,
    /// Explained variance per component, non-increasing.
    pub explained_variance: Vec<f64>,
}

/// Fit PCA with `k` components via eigen-decomposition of the covariance.
///
/// The sign of each component is fixed by making its largest-magnitude
/// coordinate positive, so fits are deterministic.
pub fn fit_pca(x: &Matrix, k: usize) -> Result<PcaModel, FeatureError> {
    let n = x.rows();
    let d = x.cols();
    if n == 0 || d == 0 {
        return Err(FeatureError::EmptyMatrix);
    }
    let max_k = n.min(d);
    if k == 0 || k > max_k {
        return Err(FeatureError::PcaKOutOfRange { k, max_k });
    }
    let mut mean = vec![0.0; d];
    for row in x.iter_rows() {
        matrix::axpy(&mut mean, 1.0, row);
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    // sample covariance (1/n) of the centered data
    let mut cov = Matrix::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in x.iter_rows() {
        for j in 0..d {
            centered[j] = row[j] - mean[j];
        }
        for i in 0..d {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let out = cov.row_mut(i);
            for j in 0..d {
                out[j] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..d {
            let v = cov.get(i, j) / n as f64;
            cov.set(i, j, v);
        }
    }
    let (eigenvalues, eigenvectors) = matrix::symmetric_eigen(&cov);
    let mut components = Matrix::zeros(k, d);
    for c in 0..k {
        let mut row: Vec<f64> = (0..d).map(|j| eigenvectors.get(c, j)).collect();
        // deterministic sign: largest-magnitude coordinate positive
        let pivot = row
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(ib.cmp(ia))
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        if row[pivot] < 0.0 {
            for v in &mut row {
                *v = -*v;
            }
        }
        components.row_mut(c).copy_from_slice(&row);
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance: eigenvalues[..k].to_vec(),
    })
}

/// Project rows of `x` onto the fitted components: an n x k matrix.
pub fn apply_pca(model: &PcaModel, x: &Matrix) -> Matrix {
    let k = model.components.rows();
    let mut out = Matrix::zeros(x.rows(), k);
    let mut centered = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        let row = x.row(i);
        for j in 0..row.len() {
            centered[j] = row[j] - model.mean[j];
        }
        for c in 0..k {
            out.set(i, c, matrix::dot(model.components.row(c), &centered));
        }
    }
    out
}

impl PcaModel {
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = row.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
        (0..self.components.rows())
            .map(|c| matrix::dot(self.components.row(c), &centered))
            .collect()
    }
}

/// Cosine similarity in [-1, 1]. Errors on zero-norm input or unequal dims.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, FeatureError> {
    if a.len() != b.len() {
        return Err(FeatureError::CosineDimMismatch { a: a.len(), b: b.len() });
    }
    let na = matrix::norm(a);
    let nb = matrix::norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(FeatureError::ZeroNorm);
    }
    Ok((matrix::dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}
