//! Random Fourier features: an explicit low-rank stand-in for the RBF kernel.
//!
//! Inputs are standardized, reduced with PCA, and mapped through
//! z_j(x) = sqrt(2/D) * cos(w_j . x + b_j) with w_j ~ N(0, 2*gamma*I) and
//! b_j uniform on [0, 2*pi). Then z.z' approximates exp(-gamma*|x-x'|^2)
//! and a plain logistic regression on z plays the part of a kernel machine.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::{apply_pca, apply_scaler, fit_pca, fit_scaler, PcaModel, ScalerModel};
use crate::features::LabeledMatrix;
use crate::matrix::Matrix;

use super::linear::LinearParams;
use super::{
    default_gamma, put_f64_slice, put_matrix, read_f64_vec, read_matrix, validate_binary,
    BackendKind, FusionModel, ModelIoError, ModelParams, TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RffParams {
    pub scaler: ScalerModel,
    pub pca: PcaModel,
    /// D x p projection, one frequency per row.
    pub projection: Matrix,
    /// phase offsets, length D
    pub offsets: Vec<f64>,
    pub gamma: f64,
    pub linear: LinearParams,
}

impl RffParams {
    /// Map an already-reduced vector to the random feature space.
    pub fn featurize(&self, reduced: &[f64]) -> Vec<f64> {
        fourier_features(&self.projection, &self.offsets, reduced)
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let scaled = self.scaler.transform_row(x);
        let reduced = self.pca.transform_row(&scaled);
        self.linear.score(&self.featurize(&reduced))
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        put_f64_slice(w, &self.scaler.mean);
        put_f64_slice(w, &self.scaler.stddev);
        put_f64_slice(w, &self.pca.mean);
        put_matrix(w, &self.pca.components);
        put_f64_slice(w, &self.pca.explained_variance);
        put_matrix(w, &self.projection);
        put_f64_slice(w, &self.offsets);
        w.put_f64(self.gamma);
        self.linear.write(w);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let scaler = ScalerModel {
            mean: read_f64_vec(r)?,
            stddev: read_f64_vec(r)?,
        };
        let pca = PcaModel {
            mean: read_f64_vec(r)?,
            components: read_matrix(r)?,
            explained_variance: read_f64_vec(r)?,
        };
        Ok(RffParams {
            scaler,
            pca,
            projection: read_matrix(r)?,
            offsets: read_f64_vec(r)?,
            gamma: r.read_f64()?,
            linear: LinearParams::read(r)?,
        })
    }
}

/// z(x) for an explicit map: sqrt(2/D) * cos(projection . x + offsets).
pub fn fourier_features(projection: &Matrix, offsets: &[f64], x: &[f64]) -> Vec<f64> {
    let d = projection.rows();
    let scale = (2.0 / d as f64).sqrt();
    let mut z = Vec::with_capacity(d);
    for j in 0..d {
        z.push(scale * (crate::matrix::dot(projection.row(j), x) + offsets[j]).cos());
    }
    z
}

/// Draw the random map for dimension `p` -> `n_features`.
pub fn sample_fourier_map(
    p: usize,
    n_features: usize,
    gamma: f64,
    seed: u64,
) -> (Matrix, Vec<f64>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, (2.0 * gamma).sqrt()).expect("finite stddev");
    let mut projection = Matrix::zeros(n_features, p);
    for j in 0..n_features {
        for c in 0..p {
            projection.set(j, c, normal.sample(&mut rng));
        }
    }
    let offsets = (0..n_features)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();
    (projection, offsets)
}

/// Kernel value the random features are approximating.
pub fn rbf_kernel(gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    (-gamma * crate::matrix::sq_dist(a, b)).exp()
}

pub fn train_rff_logreg(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let scaler = fit_scaler(&data.x).map_err(|_| TrainError::EmptyData)?;
    let scaled = apply_scaler(&scaler, &data.x);
    let p = cfg.pca_dim.min(data.n_rows()).min(data.dim());
    let pca = fit_pca(&scaled, p).map_err(|_| TrainError::EmptyData)?;
    let reduced = apply_pca(&pca, &scaled);

    let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(&reduced));
    let (projection, offsets) = sample_fourier_map(p, cfg.rff_dim, gamma, cfg.seed);

    let mut z = Matrix::zeros(data.n_rows(), cfg.rff_dim);
    for i in 0..data.n_rows() {
        let zi = fourier_features(&projection, &offsets, reduced.row(i));
        z.row_mut(i).copy_from_slice(&zi);
    }
    let lifted = LabeledMatrix {
        x: z,
        labels: data.labels.clone(),
        trial_refs: data.trial_refs.clone(),
    };
    let mut inner_cfg = cfg.clone();
    inner_cfg.kind = BackendKind::LogReg;
    let inner = super::linear::train_logreg(&lifted, &inner_cfg)?;
    let linear = match inner.params {
        ModelParams::Linear(p) => p,
        _ => unreachable!("logistic training yields linear params"),
    };
    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: data.dim(),
        params: ModelParams::Rff(RffParams {
            scaler,
            pca,
            projection,
            offsets,
            gamma,
            linear,
        }),
        trace: inner.trace,
    })
}
