//! Per-class diagonal Gaussian mixtures scored as a log-likelihood ratio.
//!
//! One mixture is fit to each class with EM; the model's score is
//! log p(x | positive) - log p(x | negative). Variances are floored, and
//! the floored M-step still maximizes the constrained surrogate, so the
//! training log-likelihood never decreases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;
use crate::matrix::Matrix;

use super::{
    put_f64_slice, put_matrix, read_f64_vec, read_matrix, validate_binary, FusionModel,
    ModelIoError, ModelParams, TrainConfig, TrainError,
};

const LN_2PI: f64 = 1.8378770664093453;

/// Diagonal-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGmm {
    pub weights: Vec<f64>,
    /// component means, one row per component
    pub means: Matrix,
    /// per-dimension variances, same shape as `means`
    pub variances: Matrix,
}

impl DiagGmm {
    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    /// Mixture log-density at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.n_components());
        for c in 0..self.n_components() {
            terms.push(self.weights[c].ln() + self.component_log_pdf(c, x));
        }
        log_sum_exp(&terms)
    }

    fn component_log_pdf(&self, c: usize, x: &[f64]) -> f64 {
        let mu = self.means.row(c);
        let var = self.variances.row(c);
        let mut acc = 0.0;
        for j in 0..x.len() {
            let diff = x[j] - mu[j];
            acc += -0.5 * (LN_2PI + var[j].ln()) - diff * diff / (2.0 * var[j]);
        }
        acc
    }

    fn write(&self, w: &mut ByteWriter) {
        put_f64_slice(w, &self.weights);
        put_matrix(w, &self.means);
        put_matrix(w, &self.variances);
    }

    fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        Ok(DiagGmm {
            weights: read_f64_vec(r)?,
            means: read_matrix(r)?,
            variances: read_matrix(r)?,
        })
    }
}

/// The two class-conditional mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub positive: DiagGmm,
    pub negative: DiagGmm,
}

impl GmmParams {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.positive.log_pdf(x) - self.negative.log_pdf(x)
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        self.positive.write(w);
        self.negative.write(w);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        Ok(GmmParams {
            positive: DiagGmm::read(r)?,
            negative: DiagGmm::read(r)?,
        })
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

/// E-step: responsibilities (rows sum to 1) and the data log-likelihood.
pub(crate) fn e_step(x: &Matrix, gmm: &DiagGmm) -> (Matrix, f64) {
    let n = x.rows();
    let k = gmm.n_components();
    let mut resp = Matrix::zeros(n, k);
    let mut ll = 0.0;
    let mut joint = vec![0.0; k];
    for i in 0..n {
        for c in 0..k {
            joint[c] = gmm.weights[c].ln() + gmm.component_log_pdf(c, x.row(i));
        }
        let norm = log_sum_exp(&joint);
        ll += norm;
        for c in 0..k {
            resp.set(i, c, (joint[c] - norm).exp());
        }
    }
    (resp, ll)
}

/// Spread-out initial means: first center near the data, the rest chosen
/// with probability proportional to squared distance from chosen centers.
fn init_means(x: &Matrix, k: usize, rng: &mut ChaCha20Rng) -> Matrix {
    let n = x.rows();
    let mut chosen: Vec<usize> = vec![rng.gen_range(0..n)];
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| crate::matrix::sq_dist(x.row(i), x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut draw = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in dist2.iter().enumerate() {
                if draw < d {
                    pick = i;
                    break;
                }
                draw -= d;
            }
            pick
        } else {
            // all remaining mass at the chosen centers: spread by index
            chosen.len() * n / k
        };
        chosen.push(next);
        for i in 0..n {
            dist2[i] = dist2[i].min(crate::matrix::sq_dist(x.row(i), x.row(next)));
        }
    }
    let mut means = Matrix::zeros(k, x.cols());
    for (c, &i) in chosen.iter().enumerate() {
        means.row_mut(c).copy_from_slice(x.row(i));
    }
    means
}

/// Fit one diagonal GMM by EM. Returns the model and the per-iteration
/// log-likelihood trace (non-decreasing up to floating-point slack).
pub fn fit_diag_gmm(
    x: &Matrix,
    n_components: usize,
    max_iterations: usize,
    tolerance: f64,
    covariance_floor: f64,
    seed: u64,
) -> Result<(DiagGmm, Vec<f64>), TrainError> {
    let n = x.rows();
    let d = x.cols();
    if n == 0 || d == 0 {
        return Err(TrainError::EmptyData);
    }
    if n < n_components {
        return Err(TrainError::DegenerateClass {
            class: "mixture",
            got: n,
            needed: n_components,
        });
    }
    let k = n_components;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // initial spread means, per-dimension data variance, equal weights
    let means = init_means(x, k, &mut rng);
    let mut col_mean = vec![0.0; d];
    for row in x.iter_rows() {
        crate::matrix::axpy(&mut col_mean, 1.0, row);
    }
    for m in &mut col_mean {
        *m /= n as f64;
    }
    let mut col_var = vec![0.0; d];
    for row in x.iter_rows() {
        for j in 0..d {
            let c = row[j] - col_mean[j];
            col_var[j] += c * c;
        }
    }
    let mut variances = Matrix::zeros(k, d);
    for c in 0..k {
        for j in 0..d {
            variances.set(c, j, (col_var[j] / n as f64).max(covariance_floor));
        }
    }
    let mut gmm = DiagGmm {
        weights: vec![1.0 / k as f64; k],
        means,
        variances,
    };

    let mut trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;
    for iteration in 0..max_iterations {
        let (resp, ll) = e_step(x, &gmm);
        if !ll.is_finite() {
            return Err(TrainError::NonFinite { what: "log-likelihood", iteration });
        }
        trace.push(ll);
        if (ll - prev_ll).abs() < tolerance {
            break;
        }
        prev_ll = ll;

        for c in 0..k {
            let nc: f64 = (0..n).map(|i| resp.get(i, c)).sum();
            if nc < 1e-12 {
                // vanished component: freeze it this round
                continue;
            }
            gmm.weights[c] = nc / n as f64;
            let mut mu = vec![0.0; d];
            for i in 0..n {
                crate::matrix::axpy(&mut mu, resp.get(i, c), x.row(i));
            }
            for m in &mut mu {
                *m /= nc;
            }
            let mut var = vec![0.0; d];
            for i in 0..n {
                let r = resp.get(i, c);
                let row = x.row(i);
                for j in 0..d {
                    let diff = row[j] - mu[j];
                    var[j] += r * diff * diff;
                }
            }
            for v in &mut var {
                *v = (*v / nc).max(covariance_floor);
            }
            gmm.means.row_mut(c).copy_from_slice(&mu);
            gmm.variances.row_mut(c).copy_from_slice(&var);
        }
    }
    Ok((gmm, trace))
}

/// Fit one mixture per class; scoring is the log-likelihood ratio.
pub fn train_gmm_llr(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    let (pos_idx, neg_idx) = validate_binary(data)?;
    for (class, idx) in [("positive", &pos_idx), ("negative", &neg_idx)] {
        if idx.len() < cfg.n_components {
            return Err(TrainError::DegenerateClass {
                class: if class == "positive" { "positive" } else { "negative" },
                got: idx.len(),
                needed: cfg.n_components,
            });
        }
    }
    let extract = |idx: &[usize]| {
        let mut m = Matrix::zeros(idx.len(), data.dim());
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(data.x.row(i));
        }
        m
    };
    let x_pos = extract(&pos_idx);
    let x_neg = extract(&neg_idx);
    let (positive, mut trace) = fit_diag_gmm(
        &x_pos,
        cfg.n_components,
        cfg.max_iterations,
        cfg.tolerance,
        cfg.covariance_floor,
        cfg.seed,
    )?;
    let (negative, neg_trace) = fit_diag_gmm(
        &x_neg,
        cfg.n_components,
        cfg.max_iterations,
        cfg.tolerance,
        cfg.covariance_floor,
        cfg.seed.wrapping_add(1),
    )?;
    trace.extend(neg_trace);
    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: data.dim(),
        params: ModelParams::Gmm(GmmParams { positive, negative }),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testdata;
    use super::*;
    use rand::Rng;

    fn random_matrix(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut m = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                m.set(i, j, rng.gen_range(-3.0..3.0));
            }
        }
        m
    }

    #[test]
    fn responsibilities_are_normalized() {
        let x = random_matrix(40, 3, 17);
        let (gmm, _) = fit_diag_gmm(&x, 2, 5, 1e-7, 1e-6, 1).unwrap();
        let (resp, _) = e_step(&x, &gmm);
        for i in 0..resp.rows() {
            let sum: f64 = (0..resp.cols()).map(|c| resp.get(i, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {i} sums to {sum}");
        }
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..5 {
            let x = random_matrix(60, 2, 100 + seed);
            let (_, trace) = fit_diag_gmm(&x, 3, 200, 1e-9, 1e-6, seed).unwrap();
            assert!(trace.len() > 2);
            for pair in trace.windows(2) {
                assert!(
                    pair[1] >= pair[0] - 1e-10,
                    "seed {seed}: {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
        }
    }

    #[test]
    fn two_cluster_means_recovered() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut rows = Vec::new();
        for _ in 0..100 {
            rows.push(vec![-3.0 + rng.gen_range(-0.5..0.5)]);
            rows.push(vec![3.0 + rng.gen_range(-0.5..0.5)]);
        }
        let x = Matrix::from_rows(&rows);
        let (gmm, _) = fit_diag_gmm(&x, 2, 300, 1e-9, 1e-6, 2).unwrap();
        let mut means = vec![gmm.means.get(0, 0), gmm.means.get(1, 0)];
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 3.0).abs() < 0.3, "low mean {}", means[0]);
        assert!((means[1] - 3.0).abs() < 0.3, "high mean {}", means[1]);
        assert!((gmm.weights[0] - 0.5).abs() < 0.1);
    }

    #[test]
    fn separated_classes_get_correct_llr_signs() {
        let data = testdata::blobs(40, 4, 5.0, 23);
        let cfg = TrainConfig::for_kind(super::super::BackendKind::Gmm);
        let model = train_gmm_llr(&data, &cfg).unwrap();
        for (row, &label) in data.x.iter_rows().zip(&data.labels) {
            let s = model.score(row).unwrap();
            assert_eq!(s > 0.0, label > 0.5, "llr {s} for label {label}");
        }
    }

    #[test]
    fn degenerate_class_is_named() {
        let data = testdata::labeled(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![1.0, 0.0, 0.0],
        );
        let cfg = TrainConfig::for_kind(super::super::BackendKind::Gmm);
        match train_gmm_llr(&data, &cfg) {
            Err(TrainError::DegenerateClass { class: "positive", got: 1, needed: 2 }) => {}
            other => panic!("expected degenerate positive class, got {other:?}"),
        }
    }

    #[test]
    fn constant_features_hit_the_variance_floor() {
        let data = testdata::labeled(
            vec![vec![1.0, 5.0]; 4]
                .into_iter()
                .chain(vec![vec![-1.0, 5.0]; 4])
                .collect(),
            vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
        );
        let mut cfg = TrainConfig::for_kind(super::super::BackendKind::Gmm);
        cfg.n_components = 2;
        let model = train_gmm_llr(&data, &cfg).unwrap();
        if let ModelParams::Gmm(p) = &model.params {
            for c in 0..2 {
                assert_eq!(p.positive.variances.get(c, 1), 1e-6);
            }
        }
        assert!(model.score(&[1.0, 5.0]).unwrap().is_finite());
    }

    #[test]
    fn same_seed_reproduces_scores() {
        let data = testdata::blobs(25, 3, 1.0, 40);
        let cfg = TrainConfig::for_kind(super::super::BackendKind::Gmm);
        let m1 = train_gmm_llr(&data, &cfg).unwrap();
        let m2 = train_gmm_llr(&data, &cfg).unwrap();
        let probe = [0.1, -0.2, 0.4];
        assert_eq!(m1.score(&probe).unwrap(), m2.score(&probe).unwrap());
    }
}
