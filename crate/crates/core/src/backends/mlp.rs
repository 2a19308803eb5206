//! Small feed-forward network trained with minibatch gradient descent.
//!
//! Hidden layers use a leaky rectifier; the output layer is a single
//! linear unit whose value is the score, interpreted as a logit under
//! logistic loss. Updates use classical momentum, minibatches are drawn
//! from a seeded shuffle each epoch, and everything runs single-threaded,
//! so a given seed reproduces the trained weights bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;
use crate::matrix::Matrix;

use super::{
    log1p_exp, put_f64_slice, put_matrix, read_f64_vec, read_matrix, sigmoid, validate_binary,
    FusionModel, ModelIoError, ModelParams, TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// one weight matrix per layer, each out x in
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub leaky_slope: f64,
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

fn leaky_grad(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

impl MlpParams {
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Pre-activations and activations for every layer; `acts[0]` is the input.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let mut z = self.weights[l].mul_vec(acts.last().unwrap());
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            let a = if l + 1 == self.n_layers() {
                z.clone() // linear output unit
            } else {
                z.iter().map(|&v| leaky(v, self.leaky_slope)).collect()
            };
            pre.push(z);
            acts.push(a);
        }
        (pre, acts)
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let mut z = self.weights[l].mul_vec(&a);
            for (zi, bi) in z.iter_mut().zip(&self.biases[l]) {
                *zi += bi;
            }
            if l + 1 < self.n_layers() {
                for v in &mut z {
                    *v = leaky(*v, self.leaky_slope);
                }
            }
            a = z;
        }
        a[0]
    }

    /// All weights and biases as one vector, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.n_layers() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }

    /// Inverse of `flatten`; shapes must already match.
    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for l in 0..self.weights.len() {
            let wlen = self.weights[l].rows() * self.weights[l].cols();
            self.weights[l]
                .data_mut()
                .copy_from_slice(&flat[at..at + wlen]);
            at += wlen;
            let blen = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[at..at + blen]);
            at += blen;
        }
        assert_eq!(at, flat.len(), "flat vector does not match network shape");
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.put_u32(self.weights.len() as u32);
        for l in 0..self.weights.len() {
            put_matrix(w, &self.weights[l]);
            put_f64_slice(w, &self.biases[l]);
        }
        w.put_f64(self.leaky_slope);
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let layers = r.read_u32()? as usize;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for _ in 0..layers {
            weights.push(read_matrix(r)?);
            biases.push(read_f64_vec(r)?);
        }
        Ok(MlpParams {
            weights,
            biases,
            leaky_slope: r.read_f64()?,
        })
    }
}

/// Gradients in the same layout as the parameters they differentiate.
#[derive(Debug, Clone)]
pub struct MlpGradient {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradient {
    fn zeros_like(net: &MlpParams) -> Self {
        MlpGradient {
            weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in 0..self.weights.len() {
            out.extend_from_slice(self.weights[l].data());
            out.extend_from_slice(&self.biases[l]);
        }
        out
    }
}

/// Mean logistic loss plus L2 weight penalty over the given rows, with
/// exact gradients from backpropagation.
pub fn loss_and_gradient(
    net: &MlpParams,
    x: &Matrix,
    labels: &[f64],
    lambda: f64,
) -> (f64, MlpGradient) {
    let batch = x.rows() as f64;
    let layers = net.n_layers();
    let mut grad = MlpGradient::zeros_like(net);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (pre, acts) = net.forward_trace(x.row(i));
        let logit = pre[layers - 1][0];
        loss += log1p_exp(if y > 0.5 { -logit } else { logit });

        // walk deltas backward from the output unit
        let mut delta = vec![(sigmoid(logit) - y) / batch];
        for l in (0..layers).rev() {
            for (r, &dr) in delta.iter().enumerate() {
                grad.biases[l][r] += dr;
                let gw = grad.weights[l].row_mut(r);
                for (c, &ac) in acts[l].iter().enumerate() {
                    gw[c] += dr * ac;
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = vec![0.0; net.weights[l].cols()];
            for (r, &dr) in delta.iter().enumerate() {
                crate::matrix::axpy(&mut prev, dr, net.weights[l].row(r));
            }
            for (c, p) in prev.iter_mut().enumerate() {
                *p *= leaky_grad(pre[l - 1][c], net.leaky_slope);
            }
            delta = prev;
        }
    }
    loss /= batch;
    for l in 0..layers {
        let w = net.weights[l].data();
        loss += 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        let gw = grad.weights[l].data_mut();
        for (g, &v) in gw.iter_mut().zip(w) {
            *g += lambda * v;
        }
    }
    (loss, grad)
}

/// Fresh network with scaled normal weights and zero biases.
pub(crate) fn init_network(
    input_dim: usize,
    hidden: &[usize],
    slope: f64,
    rng: &mut ChaCha20Rng,
) -> MlpParams {
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let mut weights = Vec::with_capacity(dims.len() - 1);
    let mut biases = Vec::with_capacity(dims.len() - 1);
    for l in 0..dims.len() - 1 {
        let (fan_in, fan_out) = (dims[l], dims[l + 1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite stddev");
        let mut w = Matrix::zeros(fan_out, fan_in);
        for v in w.data_mut() {
            *v = normal.sample(rng);
        }
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    MlpParams { weights, biases, leaky_slope: slope }
}

pub fn train_mlp(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let n = data.n_rows();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut net = init_network(data.dim(), &cfg.layer_sizes, cfg.leaky_slope, &mut rng);
    let mut velocity = MlpGradient::zeros_like(&net);

    let full_loss = |net: &MlpParams| loss_and_gradient(net, &data.x, &data.labels, cfg.reg_lambda).0;
    let mut trace = vec![full_loss(&net)];
    let batch_size = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.max_iterations {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let mut bx = Matrix::zeros(chunk.len(), data.dim());
            let mut by = Vec::with_capacity(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                bx.row_mut(r).copy_from_slice(data.x.row(i));
                by.push(data.labels[i]);
            }
            let (_, grad) = loss_and_gradient(&net, &bx, &by, cfg.reg_lambda);
            for l in 0..net.n_layers() {
                let v = velocity.weights[l].data_mut();
                let g = grad.weights[l].data();
                let w = net.weights[l].data_mut();
                for j in 0..v.len() {
                    v[j] = cfg.momentum * v[j] - cfg.learning_rate * g[j];
                    w[j] += v[j];
                }
                for j in 0..net.biases[l].len() {
                    velocity.biases[l][j] =
                        cfg.momentum * velocity.biases[l][j] - cfg.learning_rate * grad.biases[l][j];
                    net.biases[l][j] += velocity.biases[l][j];
                }
            }
        }
        let loss = full_loss(&net);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "epoch loss", iteration: epoch });
        }
        trace.push(loss);
    }
    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: data.dim(),
        params: ModelParams::Mlp(net),
        trace,
    })
}
