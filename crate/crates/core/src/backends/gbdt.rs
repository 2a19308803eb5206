//! Gradient boosting with oblivious (symmetric) decision trees.
//!
//! Features are pre-quantized into at most `max_bins` quantile bins, and
//! every level of a tree applies one shared (feature, threshold) test, so
//! a depth-L tree is just L conditions and 2^L leaf values. Boosting
//! minimizes logistic loss: each round fits leaf values by a damped Newton
//! step, -lr * sum(g) / (sum(h) + l2), on the current gradients.
//!
//! Level selection is greedy and deterministic: features ascending, bin
//! boundaries ascending, first-seen maximum gain kept on ties. Zero-gain
//! splits are allowed, which is what lets two levels crack parity-style
//! interactions that no single level can see.

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;

use super::{
    log1p_exp, put_f64_slice, read_f64_vec, sigmoid, validate_binary, FusionModel, ModelIoError,
    ModelParams, TrainConfig, TrainError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ObliviousTree {
    /// one feature per level
    pub features: Vec<u32>,
    /// numeric boundary per level; a sample goes "high" when x >= threshold
    pub thresholds: Vec<f64>,
    /// 2^levels values, indexed by the bitmask of "high" outcomes
    pub leaf_values: Vec<f64>,
}

impl ObliviousTree {
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut idx = 0usize;
        for (level, (&f, &t)) in self.features.iter().zip(&self.thresholds).enumerate() {
            if x[f as usize] >= t {
                idx |= 1 << level;
            }
        }
        idx
    }

    fn write(&self, w: &mut ByteWriter) {
        w.put_u32(self.features.len() as u32);
        for &f in &self.features {
            w.put_u32(f);
        }
        put_f64_slice(w, &self.thresholds);
        put_f64_slice(w, &self.leaf_values);
    }

    fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let levels = r.read_u32()? as usize;
        let mut features = Vec::with_capacity(levels);
        for _ in 0..levels {
            features.push(r.read_u32()?);
        }
        let thresholds = read_f64_vec(r)?;
        let leaf_values = read_f64_vec(r)?;
        if thresholds.len() != levels || leaf_values.len() != 1 << levels {
            return Err(ModelIoError::BadParams(
                "oblivious tree level counts disagree".into(),
            ));
        }
        Ok(ObliviousTree { features, thresholds, leaf_values })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GbdtParams {
    /// prior log-odds the ensemble starts from
    pub base_score: f64,
    pub trees: Vec<ObliviousTree>,
}

impl GbdtParams {
    pub fn score(&self, x: &[f64]) -> f64 {
        let mut f = self.base_score;
        for tree in &self.trees {
            f += tree.leaf_values[tree.leaf_index(x)];
        }
        f
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.put_f64(self.base_score);
        w.put_u32(self.trees.len() as u32);
        for tree in &self.trees {
            tree.write(w);
        }
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let base_score = r.read_f64()?;
        let n = r.read_u32()? as usize;
        let mut trees = Vec::with_capacity(n);
        for _ in 0..n {
            trees.push(ObliviousTree::read(r)?);
        }
        Ok(GbdtParams { base_score, trees })
    }
}

/// Strictly increasing quantile cut points for one feature column.
pub(crate) fn quantile_edges(column: &[f64], max_bins: usize) -> Vec<f64> {
    let mut sorted = column.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut edges = Vec::new();
    for q in 1..max_bins {
        let pos = q * n / max_bins;
        if pos == 0 || pos >= n {
            continue;
        }
        let (lo, hi) = (sorted[pos - 1], sorted[pos]);
        if lo < hi {
            let edge = (lo + hi) / 2.0;
            if edges.last().map_or(true, |&last| edge > last) {
                edges.push(edge);
            }
        }
    }
    // few samples relative to the bin budget: keep every distinct boundary
    if n < max_bins {
        edges.clear();
        for i in 1..n {
            if sorted[i - 1] < sorted[i] {
                edges.push((sorted[i - 1] + sorted[i]) / 2.0);
            }
        }
    }
    edges
}

fn bin_of(edges: &[f64], x: f64) -> usize {
    edges.iter().take_while(|&&e| e <= x).count()
}

pub fn train_gbdt(data: &LabeledMatrix, cfg: &TrainConfig) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let n = data.n_rows();
    let d = data.dim();
    let lr = cfg.learning_rate;
    let l2 = cfg.l2_leaf_reg;

    let edges: Vec<Vec<f64>> = (0..d)
        .map(|f| {
            let column: Vec<f64> = (0..n).map(|i| data.x.get(i, f)).collect();
            quantile_edges(&column, cfg.max_bins)
        })
        .collect();
    // binned copy of the data, sample-major
    let binned: Vec<Vec<u16>> = (0..n)
        .map(|i| {
            (0..d)
                .map(|f| bin_of(&edges[f], data.x.get(i, f)) as u16)
                .collect()
        })
        .collect();

    let pos = data.n_positive() as f64;
    let prior = (pos / n as f64).clamp(1e-12, 1.0 - 1e-12);
    let base_score = (prior / (1.0 - prior)).ln();

    let mut f: Vec<f64> = vec![base_score; n];
    let mut g = vec![0.0; n];
    let mut h = vec![0.0; n];
    let mean_loss = |f: &[f64]| -> f64 {
        f.iter()
            .zip(&data.labels)
            .map(|(&fi, &y)| log1p_exp(if y > 0.5 { -fi } else { fi }))
            .sum::<f64>()
            / n as f64
    };

    let mut trace = vec![mean_loss(&f)];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for round in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(f[i]);
            g[i] = p - data.labels[i];
            h[i] = p * (1.0 - p);
        }

        let mut leaf_of: Vec<usize> = vec![0; n];
        let mut features = Vec::new();
        let mut thresholds = Vec::new();
        for level in 0..cfg.tree_depth {
            let leaves = 1usize << level;
            let mut best: Option<(f64, usize, usize)> = None; // gain, feature, boundary
            for feat in 0..d {
                let bins = edges[feat].len() + 1;
                if bins < 2 {
                    continue;
                }
                // (sum g, sum h) per (leaf, bin), leaf-major
                let mut hist = vec![(0.0, 0.0); leaves * bins];
                for i in 0..n {
                    let cell = &mut hist[leaf_of[i] * bins + binned[i][feat] as usize];
                    cell.0 += g[i];
                    cell.1 += h[i];
                }
                let mut totals = vec![(0.0, 0.0); leaves];
                for leaf in 0..leaves {
                    for b in 0..bins {
                        let (cg, ch) = hist[leaf * bins + b];
                        totals[leaf].0 += cg;
                        totals[leaf].1 += ch;
                    }
                }
                let mut left = vec![(0.0, 0.0); leaves];
                for boundary in 1..bins {
                    let mut gain = 0.0;
                    for leaf in 0..leaves {
                        let (cg, ch) = hist[leaf * bins + boundary - 1];
                        left[leaf].0 += cg;
                        left[leaf].1 += ch;
                        let (lg, lh) = left[leaf];
                        let (tg, th) = totals[leaf];
                        let (rg, rh) = (tg - lg, th - lh);
                        gain += lg * lg / (lh + l2) + rg * rg / (rh + l2);
                    }
                    if best.map_or(true, |(bg, _, _)| gain > bg) {
                        best = Some((gain, feat, boundary));
                    }
                }
            }
            let Some((_, feat, boundary)) = best else {
                break; // every feature is constant
            };
            let threshold = edges[feat][boundary - 1];
            for i in 0..n {
                if binned[i][feat] as usize >= boundary {
                    leaf_of[i] |= 1 << level;
                }
            }
            features.push(feat as u32);
            thresholds.push(threshold);
        }

        let leaves = 1usize << features.len();
        let mut sums = vec![(0.0, 0.0); leaves];
        for i in 0..n {
            sums[leaf_of[i]].0 += g[i];
            sums[leaf_of[i]].1 += h[i];
        }
        let leaf_values: Vec<f64> = sums
            .iter()
            .map(|&(sg, sh)| -lr * sg / (sh + l2))
            .collect();
        for i in 0..n {
            f[i] += leaf_values[leaf_of[i]];
        }

        let loss = mean_loss(&f);
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { what: "boosting loss", iteration: round });
        }
        trace.push(loss);
        trees.push(ObliviousTree { features, thresholds, leaf_values });
    }

    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: d,
        params: ModelParams::Gbdt(GbdtParams { base_score, trees }),
        trace,
    })
}
