//! Bagged classification trees with Gini splits.
//!
//! Each tree is grown on a bootstrap resample, considering a random
//! sqrt(d)-sized feature subset at every node, and is expanded until its
//! leaves are pure or no feature offers a boundary. A leaf stores the
//! fraction of positives that reached it, and the forest's score is the
//! mean of those fractions, so outputs live in [0, 1].
//!
//! Split search is deterministic for a given seed: candidate features are
//! visited in ascending order and thresholds in ascending order, with the
//! first-seen minimum kept on ties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::bytesio::{ByteReader, ByteWriter};
use crate::features::LabeledMatrix;

use super::{validate_binary, FusionModel, ModelIoError, ModelParams, TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf { value: f64 },
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    /// root first, children at the stored indices
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    at = if x[*feature as usize] < *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    fn write(&self, w: &mut ByteWriter) {
        w.put_u32(self.nodes.len() as u32);
        for node in &self.nodes {
            match node {
                TreeNode::Leaf { value } => {
                    w.put_u8(0);
                    w.put_f64(*value);
                }
                TreeNode::Split { feature, threshold, left, right } => {
                    w.put_u8(1);
                    w.put_u32(*feature);
                    w.put_f64(*threshold);
                    w.put_u32(*left);
                    w.put_u32(*right);
                }
            }
        }
    }

    fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let n = r.read_u32()? as usize;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            nodes.push(match r.read_u8()? {
                0 => TreeNode::Leaf { value: r.read_f64()? },
                1 => TreeNode::Split {
                    feature: r.read_u32()?,
                    threshold: r.read_f64()?,
                    left: r.read_u32()?,
                    right: r.read_u32()?,
                },
                tag => return Err(ModelIoError::BadParams(format!("unknown node tag {tag}"))),
            });
        }
        Ok(Tree { nodes })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestParams {
    pub trees: Vec<Tree>,
}

impl ForestParams {
    pub fn score(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        sum / self.trees.len() as f64
    }

    pub(crate) fn write(&self, w: &mut ByteWriter) {
        w.put_u32(self.trees.len() as u32);
        for tree in &self.trees {
            tree.write(w);
        }
    }

    pub(crate) fn read(r: &mut ByteReader) -> Result<Self, ModelIoError> {
        let n = r.read_u32()? as usize;
        let mut trees = Vec::with_capacity(n);
        for _ in 0..n {
            trees.push(Tree::read(r)?);
        }
        Ok(ForestParams { trees })
    }
}

struct BestSplit {
    impurity: f64,
    feature: usize,
    threshold: f64,
}

/// Weighted child Gini for the best boundary of one feature, if any.
fn best_boundary_for_feature(
    data: &LabeledMatrix,
    idx: &[usize],
    feature: usize,
) -> Option<(f64, f64)> {
    let mut pairs: Vec<(f64, f64)> = idx
        .iter()
        .map(|&i| (data.x.get(i, feature), data.labels[i]))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = pairs.len() as f64;
    let total_pos: f64 = pairs.iter().map(|p| p.1).sum();
    let mut best: Option<(f64, f64)> = None;
    let mut left_pos = 0.0;
    for i in 1..pairs.len() {
        left_pos += pairs[i - 1].1;
        if pairs[i - 1].0 == pairs[i].0 {
            continue;
        }
        let nl = i as f64;
        let nr = n - nl;
        let pl = left_pos / nl;
        let pr = (total_pos - left_pos) / nr;
        let gini_l = 2.0 * pl * (1.0 - pl);
        let gini_r = 2.0 * pr * (1.0 - pr);
        let weighted = (nl * gini_l + nr * gini_r) / n;
        if best.map_or(true, |(w, _)| weighted < w) {
            best = Some((weighted, (pairs[i - 1].0 + pairs[i].0) / 2.0));
        }
    }
    best
}

/// Grow one tree over `idx`, consulting `m_features` random features per node.
pub(crate) fn build_tree(
    data: &LabeledMatrix,
    idx: &[usize],
    m_features: usize,
    rng: &mut ChaCha20Rng,
) -> Tree {
    let d = data.dim();
    let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
    let mut work = vec![(0usize, idx.to_vec())];
    while let Some((slot, members)) = work.pop() {
        let n = members.len() as f64;
        let pos: f64 = members.iter().map(|&i| data.labels[i]).sum();
        if pos == 0.0 || pos == n {
            nodes[slot] = TreeNode::Leaf { value: pos / n };
            continue;
        }
        let mut features: Vec<usize> = if m_features >= d {
            (0..d).collect()
        } else {
            rand::seq::index::sample(rng, d, m_features).into_vec()
        };
        features.sort_unstable();
        let mut best: Option<BestSplit> = None;
        for f in features {
            if let Some((weighted, threshold)) = best_boundary_for_feature(data, &members, f) {
                if best.as_ref().map_or(true, |b| weighted < b.impurity) {
                    best = Some(BestSplit { impurity: weighted, feature: f, threshold });
                }
            }
        }
        let Some(split) = best else {
            // mixed labels but no feature varies inside this node
            nodes[slot] = TreeNode::Leaf { value: pos / n };
            continue;
        };
        let (left_members, right_members): (Vec<usize>, Vec<usize>) = members
            .iter()
            .partition(|&&i| data.x.get(i, split.feature) < split.threshold);
        let left_slot = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        let right_slot = nodes.len();
        nodes.push(TreeNode::Leaf { value: 0.0 });
        nodes[slot] = TreeNode::Split {
            feature: split.feature as u32,
            threshold: split.threshold,
            left: left_slot as u32,
            right: right_slot as u32,
        };
        work.push((right_slot, right_members));
        work.push((left_slot, left_members));
    }
    Tree { nodes }
}

pub fn train_random_forest(
    data: &LabeledMatrix,
    cfg: &TrainConfig,
) -> Result<FusionModel, TrainError> {
    validate_binary(data)?;
    let n = data.n_rows();
    let d = data.dim();
    let m_features = ((d as f64).sqrt().floor() as usize).max(1);
    let mut master = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut trees = Vec::with_capacity(cfg.n_trees);
    for _ in 0..cfg.n_trees {
        let mut rng = ChaCha20Rng::seed_from_u64(master.gen());
        let bootstrap: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
        trees.push(build_tree(data, &bootstrap, m_features, &mut rng));
    }
    Ok(FusionModel {
        config: cfg.clone(),
        feature_dim: d,
        params: ModelParams::Forest(ForestParams { trees }),
        trace: Vec::new(),
    })
}
