//! Linear scorers: logistic regression and the linear-kernel SVM.
//!
//! Both minimize a mean loss plus an L2 penalty (lambda/2)*||w||^2 on the
//! weights only; the bias is unregularized. Logistic regression runs full
//! gradient descent with backtracking line search, the SVM runs subgradient
//! descent on the hinge objective and keeps the best iterate seen.

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;
use crate::matrix::{self, Matrix};

use super::{
    log1p_exp, put_f64_slice, read_f64_vec, sigmoid, signed_labels, validate_binary,
    FusionModel, ModelIoError, ModelParams, TrainConfig, TrainError,
};

/// Weights and bias of a linear decision function.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearParams {
    pub fn score(&self, x: &[f64]) -> f64 {
        matrix::dot(&self.w, x) + self.b
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        put_f64_slice(w, &self.w);
        w.put_f64(self.b);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let w = read_f64_vec(r)?;
        let b = r.read_f64()?;
        Ok(LinearParams { w, b })
    }
}

/// Regularized logistic objective and its gradient at (w, b).
///
/// `y` holds +-1 labels. Returns (objective, grad_w, grad_b). Public so the
/// analytic gradient can be checked against finite differences of the same
/// objective.
pub fn logistic_objective(
    x: &Matrix,
    y: &[f64],
    lambda: f64,
    w: &[f64],
    b: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.rows() as f64;
    let mut obj = 0.0;
    let mut grad_w = vec![0.0; x.cols()];
    let mut grad_b = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let z = matrix::dot(w, row) + b;
        let margin = y[i] * z;
        obj += log1p_exp(-margin);
        // d/dz log(1+exp(-y z)) = -y * sigmoid(-y z)
        let g = -y[i] * sigmoid(-margin);
        matrix::axpy(&mut grad_w, g, row);
        grad_b += g;
    }
    obj /= n;
    grad_b /= n;
    for (gw, &wi) in grad_w.iter_mut().zip(w) {
        *gw = *gw / n + lambda * wi;
    }
    obj += 0.5 * lambda * matrix::dot(w, w);
    (obj, grad_w, grad_b)
}

/// Hinge objective and a subgradient at (w, b); `y` holds +-1 labels.
pub fn hinge_objective(
    x: &Matrix,
    y: &[f64],
    lambda: f64,
    w: &[f64],
    b: f64,
) -> (f64, Vec<f64>, f64) {
    let n = x.rows() as f64;
    let mut obj = 0.0;
    let mut grad_w = vec![0.0; x.cols()];
    let mut grad_b = 0.0;
    for (i, row) in x.iter_rows().enumerate() {
        let z = matrix::dot(w, row) + b;
        let margin = y[i] * z;
        if margin < 1.0 {
            obj += 1.0 - margin;
            matrix::axpy(&mut grad_w, -y[i], row);
            grad_b -= y[i];
        }
    }
    obj /= n;
    grad_b /= n;
    for (gw, &wi) in grad_w.iter_mut().zip(w) {
        *gw = *gw / n + lambda * wi;
    }
    obj += 0.5 * lambda * matrix::dot(w, w);
    (obj, grad_w, grad_b)
}

/// Gradient descent with backtracking on the logistic objective.
pub fn train_logreg(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let y = signed_labels(data);
    let d = data.dim();
    let lambda = cfg.reg_lambda;

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut trace = Vec::new();
    let (mut obj, mut grad_w, mut grad_b) = logistic_objective(&data.x, &y, lambda, &w, b);
    trace.push(obj);

    let mut step = cfg.learning_rate;
    for iteration in 0..cfg.max_iterations {
        if !obj.is_finite() {
            return Err(TrainError::NonFinite { what: "objective", iteration });
        }
        let grad_sq = matrix::dot(&grad_w, &grad_w) + grad_b * grad_b;
        if grad_sq.sqrt() < cfg.tolerance {
            break;
        }
        // backtracking line search with sufficient-decrease check
        let mut accepted = false;
        for _ in 0..60 {
            let mut w_try = w.clone();
            matrix::axpy(&mut w_try, -step, &grad_w);
            let b_try = b - step * grad_b;
            let (obj_try, gw_try, gb_try) = logistic_objective(&data.x, &y, lambda, &w_try, b_try);
            if obj_try.is_finite() && obj_try <= obj - 1e-4 * step * grad_sq {
                w = w_try;
                b = b_try;
                obj = obj_try;
                grad_w = gw_try;
                grad_b = gb_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        trace.push(obj);
        step = (step * 2.0).min(cfg.learning_rate);
    }

    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: d,
        params: ModelParams::Linear(LinearParams { w, b }),
        trace,
    })
}

/// Decaying-step subgradient descent on the hinge objective; the returned
/// model is the iterate with the lowest objective and the trace is the
/// running minimum, so it is non-increasing by construction.
pub fn train_svm_linear(
    data: &LabeledMatrix,
    cfg: &TrainConfig,
) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let y = signed_labels(data);
    let d = data.dim();
    let lambda = cfg.reg_lambda;

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut obj, mut grad_w, mut grad_b) = hinge_objective(&data.x, &y, lambda, &w, b);
    let mut best_w = w.clone();
    let mut best_b = b;
    let mut best_obj = obj;
    let mut trace = vec![best_obj];

    for iteration in 0..cfg.max_iterations {
        if !obj.is_finite() {
            return Err(TrainError::NonFinite { what: "objective", iteration });
        }
        let step = cfg.learning_rate / ((iteration + 1) as f64).sqrt();
        matrix::axpy(&mut w, -step, &grad_w);
        b -= step * grad_b;
        let (next_obj, next_gw, next_gb) = hinge_objective(&data.x, &y, lambda, &w, b);
        obj = next_obj;
        grad_w = next_gw;
        grad_b = next_gb;
        if obj < best_obj {
            best_obj = obj;
            best_w.copy_from_slice(&w);
            best_b = b;
        }
        trace.push(best_obj);
    }

    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: d,
        params: ModelParams::Linear(LinearParams { w: best_w, b: best_b }),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{testdata, BackendKind};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn one_dim_pair() -> LabeledMatrix {
        testdata::labeled(vec![vec![-1.0], vec![1.0]], vec![0.0, 1.0])
    }

    fn logreg_cfg() -> TrainConfig {
        TrainConfig::for_kind(BackendKind::LogReg)
    }

    #[test]
    fn separable_pair_orders_scores() {
        let mut cfg = logreg_cfg();
        cfg.reg_lambda = 0.5;
        let model = train_logreg(&one_dim_pair(), &cfg).unwrap();
        let lo = model.score(&[-1.0]).unwrap();
        let hi = model.score(&[1.0]).unwrap();
        assert!(hi > lo);
        if let ModelParams::Linear(p) = &model.params {
            assert!(p.w[0] > 0.0);
        } else {
            panic!("wrong params kind");
        }
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let mut cfg = logreg_cfg();
        cfg.reg_lambda = 1e6;
        let model = train_logreg(&one_dim_pair(), &cfg).unwrap();
        if let ModelParams::Linear(p) = &model.params {
            assert!(matrix::norm(&p.w) < 1e-3, "norm {}", matrix::norm(&p.w));
        } else {
            panic!("wrong params kind");
        }
    }

    #[test]
    fn logreg_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 5;
        let d = 8;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let data = testdata::labeled(rows, labels);
        let y = signed_labels(&data);
        let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = rng.gen_range(-1.0..1.0);
        let lambda = 0.05;
        let h = 1e-5;

        let (_, grad_w, grad_b) = logistic_objective(&data.x, &y, lambda, &w, b);
        let mut rel_max: f64 = 0.0;
        for j in 0..d {
            let mut wp = w.clone();
            wp[j] += h;
            let mut wm = w.clone();
            wm[j] -= h;
            let fd = (logistic_objective(&data.x, &y, lambda, &wp, b).0
                - logistic_objective(&data.x, &y, lambda, &wm, b).0)
                / (2.0 * h);
            let rel = (grad_w[j] - fd).abs() / (grad_w[j].abs() + fd.abs()).max(1e-6);
            rel_max = rel_max.max(rel);
        }
        let fd_b = (logistic_objective(&data.x, &y, lambda, &w, b + h).0
            - logistic_objective(&data.x, &y, lambda, &w, b - h).0)
            / (2.0 * h);
        let rel_b = (grad_b - fd_b).abs() / (grad_b.abs() + fd_b.abs()).max(1e-6);
        rel_max = rel_max.max(rel_b);
        assert!(rel_max < 1e-5, "max relative error {rel_max}");
    }

    #[test]
    fn logreg_trace_never_increases() {
        let data = testdata::blobs(30, 3, 0.8, 5);
        let model = train_logreg(&data, &logreg_cfg()).unwrap();
        assert!(model.trace.len() > 1);
        for pair in model.trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12);
        }
    }

    #[test]
    fn linear_form_hand_case() {
        let model = FusionModel {
            config: logreg_cfg(),
            feature_dim: 2,
            params: ModelParams::Linear(LinearParams { w: vec![1.0, 0.0], b: 0.0 }),
            trace: vec![],
        };
        assert_eq!(model.score(&[2.0, 5.0]).unwrap(), 2.0);
    }

    #[test]
    fn svm_two_point_solution() {
        // symmetric points at -1/+1: for lambda <= 1 the regularized hinge
        // optimum is exactly w = 1, b = 0
        let mut cfg = TrainConfig::for_kind(BackendKind::SvmLinear);
        cfg.reg_lambda = 0.01;
        cfg.max_iterations = 5000;
        let model = train_svm_linear(&one_dim_pair(), &cfg).unwrap();
        if let ModelParams::Linear(p) = &model.params {
            assert!((p.w[0] - 1.0).abs() < 0.05, "w {}", p.w[0]);
            let boundary = -p.b / p.w[0];
            assert!(boundary.abs() < 0.05, "boundary {boundary}");
        } else {
            panic!("wrong params kind");
        }
    }

    #[test]
    fn svm_trace_is_non_increasing() {
        let data = testdata::blobs(25, 4, 0.5, 9);
        let mut cfg = TrainConfig::for_kind(BackendKind::SvmLinear);
        cfg.max_iterations = 400;
        let model = train_svm_linear(&data, &cfg).unwrap();
        for pair in model.trace.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
    }

    #[test]
    fn duplicated_data_trains_same_decision_function() {
        let base = testdata::blobs(20, 3, 0.6, 3);
        let doubled = {
            let mut rows: Vec<Vec<f64>> = base.x.iter_rows().map(|r| r.to_vec()).collect();
            rows.extend(base.x.iter_rows().map(|r| r.to_vec()));
            let mut labels = base.labels.clone();
            labels.extend(base.labels.clone());
            testdata::labeled(rows, labels)
        };
        let mut cfg = logreg_cfg();
        cfg.reg_lambda = 0.1;
        let a = train_logreg(&base, &cfg).unwrap();
        let b = train_logreg(&doubled, &cfg).unwrap();
        let mut svm_cfg = TrainConfig::for_kind(BackendKind::SvmLinear);
        svm_cfg.reg_lambda = 0.1;
        svm_cfg.max_iterations = 2000;
        let c = train_svm_linear(&base, &svm_cfg).unwrap();
        let d = train_svm_linear(&doubled, &svm_cfg).unwrap();
        for probe in [[0.2, -0.4, 0.8], [-1.0, 0.3, 0.1], [0.9, 0.9, -0.9]] {
            assert!((a.score(&probe).unwrap() - b.score(&probe).unwrap()).abs() < 1e-6);
            assert!((c.score(&probe).unwrap() - d.score(&probe).unwrap()).abs() < 1e-6);
        }
    }

    #[test]
    fn convex_reruns_match_objectives() {
        let data = testdata::blobs(30, 3, 0.4, 21);
        let m1 = train_logreg(&data, &logreg_cfg()).unwrap();
        let m2 = train_logreg(&data, &logreg_cfg()).unwrap();
        let o1 = m1.trace.last().unwrap();
        let o2 = m2.trace.last().unwrap();
        assert!((o1 - o2).abs() < 1e-6);
    }

    #[test]
    fn single_class_rejected() {
        let data = testdata::labeled(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]);
        assert!(matches!(
            train_logreg(&data, &logreg_cfg()),
            Err(TrainError::SingleClass { .. })
        ));
        assert!(matches!(
            train_svm_linear(&data, &TrainConfig::for_kind(BackendKind::SvmLinear)),
            Err(TrainError::SingleClass { .. })
        ));
    }
}
