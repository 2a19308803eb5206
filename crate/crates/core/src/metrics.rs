//! Equal error rates over labeled trial scores: SV-EER, SPF-EER, SASV-EER.
//!
//! All three are the same computation with different negative classes:
//! SV-EER scores target against nontarget trials, SPF-EER target against
//! spoof, and SASV-EER target against the pooled union. A trial whose score
//! equals the threshold is accepted, and the reported EER linearly
//! interpolates the ROC between the two operating points bracketing the
//! FAR = FRR crossing. [`eer_oracle`] recomputes the sweep by exhaustive
//! per-threshold counting and exists to cross-check [`eer`] in tests.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{LabelCounts, TrialLabel, TrialRecord};

/// Which of the three report metrics an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Sv,
    Spf,
    Sasv,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::Sv, MetricKind::Spf, MetricKind::Sasv];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Sv => "sv_eer",
            MetricKind::Spf => "spf_eer",
            MetricKind::Sasv => "sasv_eer",
        }
    }
}

/// How SASV-EER combines its two negative classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativePooling {
    /// Every negative trial counts once, regardless of class.
    #[default]
    Pooled,
    /// Nontarget and spoof classes contribute equal total weight.
    Balanced,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("{metric}: empty {side} score set")]
    EmptySide {
        metric: &'static str,
        side: &'static str,
    },
    #[error("{metric}: non-finite score {score}")]
    NonFinite { metric: &'static str, score: f64 },
    #[error("non-finite score {score} for trial ({enroll_id}, {test_id})")]
    NonFiniteTrialScore {
        enroll_id: String,
        test_id: String,
        score: f64,
    },
    #[error("{metric} requires at least one {class} trial")]
    MissingClass {
        metric: &'static str,
        class: &'static str,
    },
}

/// One scored trial.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: TrialRecord,
    pub score: f64,
}

/// Labeled trial scores; finite by construction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    entries: Vec<ScoredTrial>,
    counts: LabelCounts,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, trial: TrialRecord, score: f64) -> Result<(), MetricError> {
        if !score.is_finite() {
            return Err(MetricError::NonFiniteTrialScore {
                enroll_id: trial.enroll_id.clone(),
                test_id: trial.test_id.clone(),
                score,
            });
        }
        self.counts.bump(trial.label);
        self.entries.push(ScoredTrial { trial, score });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    pub fn iter(&self) -> impl Iterator<Item = &ScoredTrial> {
        self.entries.iter()
    }

    /// Scores of all trials carrying `label`, in insertion order.
    pub fn scores_for(&self, label: TrialLabel) -> Vec<f64> {
        self.entries
            .iter()
            .filter(|e| e.trial.label == label)
            .map(|e| e.score)
            .collect()
    }
}

/// Per-metric operating thresholds; `None` when the metric was not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricThresholds {
    pub sv: Option<f64>,
    pub spf: Option<f64>,
    pub sasv: Option<f64>,
}

/// The three EERs with their thresholds and the underlying label counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EerReport {
    pub sv_eer: Option<f64>,
    pub spf_eer: Option<f64>,
    pub sasv_eer: Option<f64>,
    pub thresholds: MetricThresholds,
    pub counts: LabelCounts,
}

impl EerReport {
    pub fn get(&self, kind: MetricKind) -> Option<f64> {
        match kind {
            MetricKind::Sv => self.sv_eer,
            MetricKind::Spf => self.spf_eer,
            MetricKind::Sasv => self.sasv_eer,
        }
    }
}

/// One DET operating point under the accept-iff-score>=threshold rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn validate_side(
    metric: &'static str,
    side: &'static str,
    scores: &[f64],
) -> Result<(), MetricError> {
    if scores.is_empty() {
        return Err(MetricError::EmptySide { metric, side });
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite { metric, score: bad });
    }
    Ok(())
}

/// Ascending distinct candidate thresholds with a final +inf sentinel.
///
/// The smallest candidate already realizes the (FAR 1, FRR 0) corner, so no
/// -inf entry is needed; the sentinel realizes (FAR 0, FRR 1).
fn candidate_thresholds(pos: &[f64], neg_scores: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut cands: Vec<f64> = pos.iter().copied().chain(neg_scores).collect();
    cands.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    cands.dedup();
    cands.push(f64::INFINITY);
    cands
}

/// FAR and FRR at each candidate, negatives carrying per-trial weights.
///
/// FAR is non-increasing and FRR non-decreasing as the threshold ascends, so
/// their difference crosses zero exactly once.
fn sweep_weighted(pos: &[f64], neg: &[(f64, f64)], cands: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut pos_sorted = pos.to_vec();
    pos_sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let mut neg_sorted = neg.to_vec();
    neg_sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let total_weight: f64 = neg_sorted.iter().map(|&(_, w)| w).sum();
    let n_pos = pos_sorted.len() as f64;

    let mut far = Vec::with_capacity(cands.len());
    let mut frr = Vec::with_capacity(cands.len());
    let mut pi = 0;
    let mut ni = 0;
    let mut weight_below = 0.0;
    for &t in cands {
        while pi < pos_sorted.len() && pos_sorted[pi] < t {
            pi += 1;
        }
        while ni < neg_sorted.len() && neg_sorted[ni].0 < t {
            weight_below += neg_sorted[ni].1;
            ni += 1;
        }
        far.push((total_weight - weight_below) / total_weight);
        frr.push(pi as f64 / n_pos);
    }
    (far, frr)
}

/// Locate the FAR = FRR point: exact hit at a candidate, otherwise linear
/// interpolation inside the sign-change bracket. The reported threshold is
/// the candidate minimizing |FAR - FRR|, smallest on ties.
fn crossing(cands: &[f64], far: &[f64], frr: &[f64]) -> (f64, f64) {
    let mut best = 0;
    for i in 1..cands.len() {
        if (far[i] - frr[i]).abs() < (far[best] - frr[best]).abs() {
            best = i;
        }
    }
    let threshold = cands[best];

    for i in 0..cands.len() {
        let diff = far[i] - frr[i];
        if diff == 0.0 {
            return (far[i], threshold);
        }
        if diff < 0.0 {
            // sign change between i-1 and i; i > 0 because diff starts at +1
            let d0 = far[i - 1] - frr[i - 1];
            let d1 = diff;
            let s = d0 / (d0 - d1);
            return (far[i - 1] + s * (far[i] - far[i - 1]), threshold);
        }
    }
    unreachable!("difference ends at -1 for nonempty sides");
}

fn eer_weighted(pos: &[f64], neg: &[(f64, f64)]) -> (f64, f64) {
    let cands = candidate_thresholds(pos, neg.iter().map(|&(s, _)| s));
    let (far, frr) = sweep_weighted(pos, neg, &cands);
    crossing(&cands, &far, &frr)
}

/// Equal error rate and operating threshold for one positive/negative split.
pub fn eer(positive_scores: &[f64], negative_scores: &[f64]) -> Result<(f64, f64), MetricError> {
    validate_side("eer", "positive", positive_scores)?;
    validate_side("eer", "negative", negative_scores)?;
    let neg: Vec<(f64, f64)> = negative_scores.iter().map(|&s| (s, 1.0)).collect();
    Ok(eer_weighted(positive_scores, &neg))
}

/// Reference EER by exhaustive per-threshold recounting; test use only.
///
/// Every distinct score plus both infinities is tried as a threshold and the
/// error rates are counted from scratch, with no shared sweep machinery.
pub fn eer_oracle(
    positive_scores: &[f64],
    negative_scores: &[f64],
) -> Result<(f64, f64), MetricError> {
    validate_side("eer_oracle", "positive", positive_scores)?;
    validate_side("eer_oracle", "negative", negative_scores)?;

    let mut thresholds: Vec<f64> = positive_scores
        .iter()
        .chain(negative_scores)
        .copied()
        .collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    thresholds.insert(0, f64::NEG_INFINITY);
    thresholds.push(f64::INFINITY);

    let points: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let fa = negative_scores.iter().filter(|&&s| s >= t).count() as f64
                / negative_scores.len() as f64;
            let fr = positive_scores.iter().filter(|&&s| s < t).count() as f64
                / positive_scores.len() as f64;
            (t, fa, fr)
        })
        .collect();

    // the -inf point duplicates the smallest candidate; skip it when picking
    // the reported threshold so ties resolve to a realizable score
    let mut best = 1;
    for i in 2..points.len() {
        if (points[i].1 - points[i].2).abs() < (points[best].1 - points[best].2).abs() {
            best = i;
        }
    }
    let threshold = points[best].0;

    let mut value = None;
    for i in 0..points.len() {
        let (_, fa, fr) = points[i];
        if fa == fr {
            value = Some(fa);
            break;
        }
        if fa < fr {
            let (_, fa0, fr0) = points[i - 1];
            let d0 = fa0 - fr0;
            let d1 = fa - fr;
            let s = d0 / (d0 - d1);
            value = Some(fa0 + s * (fa - fa0));
            break;
        }
    }
    Ok((value.expect("crossing exists"), threshold))
}

/// DET sweep from the accept-everything corner to the reject-everything one.
pub fn det_points(
    positive_scores: &[f64],
    negative_scores: &[f64],
) -> Result<Vec<DetPoint>, MetricError> {
    validate_side("det", "positive", positive_scores)?;
    validate_side("det", "negative", negative_scores)?;
    let mut cands = candidate_thresholds(positive_scores, negative_scores.iter().copied());
    cands.insert(0, f64::NEG_INFINITY);
    let neg: Vec<(f64, f64)> = negative_scores.iter().map(|&s| (s, 1.0)).collect();
    let (far, frr) = sweep_weighted(positive_scores, &neg, &cands);
    Ok(cands
        .into_iter()
        .zip(far.into_iter().zip(frr))
        .map(|(threshold, (far, frr))| DetPoint { threshold, far, frr })
        .collect())
}

/// All three EERs with pooled SASV negatives.
pub fn sasv_metrics(scores: &ScoreSet) -> Result<EerReport, MetricError> {
    sasv_metrics_with(scores, &MetricKind::ALL, NegativePooling::Pooled)
}

/// Compute the requested subset of metrics; unrequested fields stay `None`.
pub fn sasv_metrics_with(
    scores: &ScoreSet,
    requested: &[MetricKind],
    pooling: NegativePooling,
) -> Result<EerReport, MetricError> {
    let targets = scores.scores_for(TrialLabel::Target);
    let nontargets = scores.scores_for(TrialLabel::NonTarget);
    let spoofs = scores.scores_for(TrialLabel::Spoof);

    let mut report = EerReport {
        sv_eer: None,
        spf_eer: None,
        sasv_eer: None,
        thresholds: MetricThresholds::default(),
        counts: scores.counts(),
    };

    for &kind in requested {
        if targets.is_empty() {
            return Err(MetricError::MissingClass {
                metric: kind.name(),
                class: "target",
            });
        }
        match kind {
            MetricKind::Sv => {
                if nontargets.is_empty() {
                    return Err(MetricError::MissingClass {
                        metric: kind.name(),
                        class: "nontarget",
                    });
                }
                let (v, t) = eer(&targets, &nontargets)?;
                report.sv_eer = Some(v);
                report.thresholds.sv = Some(t);
            }
            MetricKind::Spf => {
                if spoofs.is_empty() {
                    return Err(MetricError::MissingClass {
                        metric: kind.name(),
                        class: "spoof",
                    });
                }
                let (v, t) = eer(&targets, &spoofs)?;
                report.spf_eer = Some(v);
                report.thresholds.spf = Some(t);
            }
            MetricKind::Sasv => {
                if nontargets.is_empty() && spoofs.is_empty() {
                    return Err(MetricError::MissingClass {
                        metric: kind.name(),
                        class: "nontarget or spoof",
                    });
                }
                let neg = match pooling {
                    NegativePooling::Pooled => nontargets
                        .iter()
                        .chain(&spoofs)
                        .map(|&s| (s, 1.0))
                        .collect::<Vec<_>>(),
                    NegativePooling::Balanced => balanced_negatives(&nontargets, &spoofs),
                };
                let (v, t) = eer_weighted(&targets, &neg);
                report.sasv_eer = Some(v);
                report.thresholds.sasv = Some(t);
            }
        }
    }
    Ok(report)
}

/// Weight each present negative class to a 0.5 total (1.0 if alone).
fn balanced_negatives(nontargets: &[f64], spoofs: &[f64]) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(nontargets.len() + spoofs.len());
    let class_share = if nontargets.is_empty() || spoofs.is_empty() {
        1.0
    } else {
        0.5
    };
    if !nontargets.is_empty() {
        let w = class_share / nontargets.len() as f64;
        out.extend(nontargets.iter().map(|&s| (s, w)));
    }
    if !spoofs.is_empty() {
        let w = class_share / spoofs.len() as f64;
        out.extend(spoofs.iter().map(|&s| (s, w)));
    }
    out
}

/// Metrics whose required classes are present in `scores`.
pub fn available_metrics(scores: &ScoreSet) -> Vec<MetricKind> {
    let counts = scores.counts();
    if counts.get(TrialLabel::Target) == 0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    if counts.get(TrialLabel::NonTarget) > 0 {
        out.push(MetricKind::Sv);
    }
    if counts.get(TrialLabel::Spoof) > 0 {
        out.push(MetricKind::Spf);
    }
    if counts.total() > counts.get(TrialLabel::Target) {
        out.push(MetricKind::Sasv);
    }
    out
}
