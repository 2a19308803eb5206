//! Kernel SVMs (RBF and polynomial) trained with sequential minimal
//! optimization on the dual soft-margin problem.
//!
//! The box constraint is C = 1/(lambda * n), so the dual matches the primal
//! convention of an L2 penalty on top of the mean hinge loss. The full
//! kernel matrix is precomputed and capped at [`KERNEL_MATRIX_LIMIT_MIB`].

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;
use crate::matrix::{self, Matrix};

use super::{
    default_gamma, put_f64_slice, put_matrix, read_f64_vec, read_matrix, signed_labels,
    validate_binary, BackendKind, FusionModel, ModelIoError, ModelParams, TrainConfig, TrainError,
};

pub const KERNEL_MATRIX_LIMIT_MIB: usize = 512;

/// Kernel family with resolved parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Rbf { gamma: f64 },
    Poly { gamma: f64, coef0: f64, degree: u32 },
}

impl KernelKind {
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelKind::Rbf { gamma } => (-gamma * matrix::sq_dist(a, b)).exp(),
            KernelKind::Poly { gamma, coef0, degree } => {
                (gamma * matrix::dot(a, b) + coef0).powi(degree as i32)
            }
        }
    }

    fn write(&self, w: &mut ByteWriter) {
        match *self {
            KernelKind::Rbf { gamma } => {
                w.put_u16(0);
                w.put_f64(gamma);
                w.put_f64(0.0);
                w.put_u32(0);
            }
            KernelKind::Poly { gamma, coef0, degree } => {
                w.put_u16(1);
                w.put_f64(gamma);
                w.put_f64(coef0);
                w.put_u32(degree);
            }
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let tag = r.read_u16()?;
        let gamma = r.read_f64()?;
        let coef0 = r.read_f64()?;
        let degree = r.read_u32()?;
        match tag {
            0 => Ok(KernelKind::Rbf { gamma }),
            1 => Ok(KernelKind::Poly { gamma, coef0, degree }),
            other => Err(ModelIoError::BadParams(format!("kernel tag {other}"))),
        }
    }
}

/// Support vectors with their dual coefficients alpha_i * y_i.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSvmParams {
    pub kernel: KernelKind,
    pub support: Matrix,
    pub coef: Vec<f64>,
    pub bias: f64,
}

impl KernelSvmParams {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut sum = self.bias;
        for (row, &c) in self.support.iter_rows().zip(&self.coef) {
            sum += c * self.kernel.eval(row, x);
        }
        sum
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        self.kernel.write(w);
        put_matrix(w, &self.support);
        put_f64_slice(w, &self.coef);
        w.put_f64(self.bias);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let kernel = KernelKind::read(r)?;
        let support = read_matrix(r)?;
        let coef = read_f64_vec(r)?;
        let bias = r.read_f64()?;
        Ok(KernelSvmParams { kernel, support, coef, bias })
    }
}

struct Smo<'a> {
    k: Matrix,
    y: &'a [f64],
    alpha: Vec<f64>,
    errors: Vec<f64>,
    b: f64,
    c: f64,
    tol: f64,
    updates: usize,
    max_updates: usize,
}

impl<'a> Smo<'a> {
    fn violates_kkt(&self, i: usize) -> bool {
        let r = self.y[i] * self.errors[i];
        (r < -self.tol && self.alpha[i] < self.c) || (r > self.tol && self.alpha[i] > 0.0)
    }

    fn non_bound(&self, i: usize) -> bool {
        self.alpha[i] > 0.0 && self.alpha[i] < self.c
    }

    /// Joint update of the pair (i1, i2); true when alpha moved.
    fn take_step(&mut self, i1: usize, i2: usize) -> bool {
        if i1 == i2 {
            return false;
        }
        let (a1, a2) = (self.alpha[i1], self.alpha[i2]);
        let (y1, y2) = (self.y[i1], self.y[i2]);
        let (e1, e2) = (self.errors[i1], self.errors[i2]);
        let s = y1 * y2;
        let (lo, hi) = if s < 0.0 {
            ((a2 - a1).max(0.0), (self.c + a2 - a1).min(self.c))
        } else {
            ((a1 + a2 - self.c).max(0.0), (a1 + a2).min(self.c))
        };
        if lo >= hi {
            return false;
        }
        let k11 = self.k.get(i1, i1);
        let k12 = self.k.get(i1, i2);
        let k22 = self.k.get(i2, i2);
        let eta = k11 + k22 - 2.0 * k12;
        let mut a2_new = if eta > 0.0 {
            (a2 + y2 * (e1 - e2) / eta).clamp(lo, hi)
        } else {
            // flat direction: evaluate the objective at both ends
            let f1 = y1 * (e1 + self.b) - a1 * k11 - s * a2 * k12;
            let f2 = y2 * (e2 + self.b) - s * a1 * k12 - a2 * k22;
            let l1 = a1 + s * (a2 - lo);
            let h1 = a1 + s * (a2 - hi);
            let obj_lo =
                l1 * f1 + lo * f2 + 0.5 * l1 * l1 * k11 + 0.5 * lo * lo * k22 + s * lo * l1 * k12;
            let obj_hi =
                h1 * f1 + hi * f2 + 0.5 * h1 * h1 * k11 + 0.5 * hi * hi * k22 + s * hi * h1 * k12;
            if obj_lo < obj_hi - 1e-12 {
                lo
            } else if obj_lo > obj_hi + 1e-12 {
                hi
            } else {
                a2
            }
        };
        if (a2_new - a2).abs() < 1e-12 * (a2_new + a2 + 1e-12) {
            return false;
        }
        if a2_new < 1e-10 * self.c {
            a2_new = 0.0;
        } else if a2_new > self.c * (1.0 - 1e-10) {
            a2_new = self.c;
        }
        let a1_new = a1 + s * (a2 - a2_new);
        let d1 = a1_new - a1;
        let d2 = a2_new - a2;

        let b1 = self.b - e1 - y1 * d1 * k11 - y2 * d2 * k12;
        let b2 = self.b - e2 - y1 * d1 * k12 - y2 * d2 * k22;
        let b_new = if a1_new > 0.0 && a1_new < self.c {
            b1
        } else if a2_new > 0.0 && a2_new < self.c {
            b2
        } else {
            0.5 * (b1 + b2)
        };
        let db = b_new - self.b;
        self.alpha[i1] = a1_new;
        self.alpha[i2] = a2_new;
        self.b = b_new;
        let row1 = self.k.row(i1);
        let row2 = self.k.row(i2);
        for (j, e) in self.errors.iter_mut().enumerate() {
            *e += y1 * d1 * row1[j] + y2 * d2 * row2[j] + db;
        }
        self.updates += 1;
        true
    }

    /// Second-choice heuristic: largest |E1 - E2| first, then sweeps.
    fn examine(&mut self, i2: usize) -> bool {
        if !self.violates_kkt(i2) {
            return false;
        }
        let e2 = self.errors[i2];
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.alpha.len() {
            if self.non_bound(i) {
                let gap = (self.errors[i] - e2).abs();
                if best.map_or(true, |(g, _)| gap > g) {
                    best = Some((gap, i));
                }
            }
        }
        if let Some((_, i1)) = best {
            if self.take_step(i1, i2) {
                return true;
            }
        }
        for i1 in 0..self.alpha.len() {
            if self.non_bound(i1) && self.take_step(i1, i2) {
                return true;
            }
        }
        for i1 in 0..self.alpha.len() {
            if self.take_step(i1, i2) {
                return true;
            }
        }
        false
    }

    fn solve(&mut self) {
        let n = self.alpha.len();
        let mut examine_all = true;
        loop {
            let mut changed = 0;
            for i in 0..n {
                if self.updates >= self.max_updates {
                    return;
                }
                if examine_all || self.non_bound(i) {
                    if self.examine(i) {
                        changed += 1;
                    }
                }
            }
            if examine_all {
                if changed == 0 {
                    return;
                }
                examine_all = false;
            } else if changed == 0 {
                examine_all = true;
            }
        }
    }
}

/// Train an RBF or polynomial SVM; `cfg.kind` selects the kernel.
pub fn train_svm_kernel(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let kernel = match cfg.kind {
        BackendKind::SvmRbf => KernelKind::Rbf {
            gamma: cfg.gamma.unwrap_or_else(|| default_gamma(&data.x)),
        },
        BackendKind::SvmPoly => KernelKind::Poly {
            gamma: cfg.gamma.unwrap_or_else(|| default_gamma(&data.x)),
            coef0: cfg.coef0,
            degree: cfg.degree,
        },
        other => {
            return Err(TrainError::BadConfig {
                message: format!("kernel solver got kind '{other}'"),
            })
        }
    };

    let n = data.n_rows();
    let bytes = n * n * std::mem::size_of::<f64>();
    let mib = bytes >> 20;
    if mib > KERNEL_MATRIX_LIMIT_MIB {
        return Err(TrainError::KernelTooLarge {
            n,
            mib,
            limit_mib: KERNEL_MATRIX_LIMIT_MIB,
        });
    }

    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel.eval(data.x.row(i), data.x.row(j));
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }

    let y = signed_labels(data);
    let c = 1.0 / (cfg.reg_lambda * n as f64);
    let mut smo = Smo {
        k,
        y: &y,
        alpha: vec![0.0; n],
        errors: y.iter().map(|&yi| -yi).collect(),
        b: 0.0,
        c,
        tol: cfg.tolerance,
        updates: 0,
        max_updates: cfg.max_iterations,
    };
    smo.solve();

    let mut rows = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        if smo.alpha[i] > 0.0 {
            rows.push(data.x.row(i).to_vec());
            coef.push(smo.alpha[i] * y[i]);
        }
    }
    // a model with no support vectors still scores via the bias
    let support = if rows.is_empty() {
        Matrix::zeros(0, data.dim())
    } else {
        Matrix::from_rows(&rows)
    };
    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: data.dim(),
        params: ModelParams::Kernel(KernelSvmParams {
            kernel,
            support,
            coef,
            bias: smo.b,
        }),
        trace: Vec::new(),
    })
}

#[cfg(test)]
pub(crate) mod smo_check {
    use super::*;

    /// Verify feasibility and the KKT conditions of a trained model against
    /// the original data: together they certify dual optimality.
    pub fn kkt_satisfied(model: &FusionModel, data: &LabeledMatrix, slack: f64) -> bool {
        let (kernel, coef, support, bias) = match &model.params {
            ModelParams::Kernel(p) => (&p.kernel, &p.coef, &p.support, p.bias),
            _ => return false,
        };
        let n = data.n_rows();
        let c = 1.0 / (model.config.reg_lambda * n as f64);
        let y: Vec<f64> = data.labels.iter().map(|&l| 2.0 * l - 1.0).collect();

        // recover alpha_i for every training row (0 when not a support vector)
        let mut alpha = vec![0.0; n];
        let mut sv_used = vec![false; coef.len()];
        for i in 0..n {
            for (s, srow) in support.iter_rows().enumerate() {
                if !sv_used[s] && srow == data.x.row(i) && coef[s] * y[i] > 0.0 {
                    alpha[i] = coef[s] * y[i];
                    sv_used[s] = true;
                    break;
                }
            }
        }
        if !sv_used.iter().all(|&u| u) {
            return false;
        }
        let sum_ay: f64 = alpha.iter().zip(&y).map(|(&a, &yi)| a * yi).sum();
        if sum_ay.abs() > 1e-9 * c {
            return false;
        }
        for i in 0..n {
            if alpha[i] < -1e-12 || alpha[i] > c * (1.0 + 1e-12) {
                return false;
            }
            let f: f64 = bias
                + support
                    .iter_rows()
                    .zip(coef)
                    .map(|(srow, &cf)| cf * kernel.eval(srow, data.x.row(i)))
                    .sum::<f64>();
            let r = y[i] * (f - y[i]);
            let ok = if alpha[i] <= 1e-12 * c {
                r >= -slack
            } else if alpha[i] >= c * (1.0 - 1e-12) {
                r <= slack
            } else {
                r.abs() <= slack
            };
            if !ok {
                return false;
            }
        }
        true
    }
}
