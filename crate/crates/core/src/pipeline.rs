//! End-to-end fusion runs and the synthetic corpus generator.
//!
//! Two entry points mirror the two fusion levels. [`run_embedding_fusion`]
//! concatenates per-utterance embeddings into one vector per trial, trains a
//! single back-end on the training partition, and scores dev and eval.
//! [`run_score_fusion`] joins per-subsystem score files on their trial keys,
//! stacks the scores into short vectors, and trains a second-stage model on
//! those. Both emit the same artifact set into the configured output
//! directory: the serialized model, one score file per partition, dev and
//! eval EER reports, and a run manifest recording the effective
//! configuration, the seed, and a digest of every file written. A failed run
//! removes whatever it already wrote.
//!
//! [`gen_synthetic`] builds a small corpus of class-conditional Gaussian
//! embeddings with the trial structure of a spoofing-aware verification
//! protocol: targets share a speaker cluster, spoofed test utterances carry
//! a countermeasure-visible shift, and `xor_mode` encodes speaker identity
//! in coordinate signs so that no linear function of the concatenated
//! enroll and test vectors separates targets from nontargets.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{model_to_bytes, train, FusionModel, ModelIoError, TrainConfig, TrainError};
use crate::embstore::{read_store, write_store, Embedding, EmbeddingStore, StoreError};
use crate::features::{
    assemble_dataset, FeatureError, FeaturePart, FeatureSpec, KeyRole, LabelRule, LabeledMatrix,
};
use crate::matrix::Matrix;
use crate::metrics::{sasv_metrics_with, EerReport, MetricError, MetricKind, NegativePooling, ScoreSet};
use crate::protocol::{parse_trials, write_trials, ProtocolError, TrialLabel, TrialList, TrialRecord};

/// Anything that can go wrong between loading a config and writing the
/// manifest. File-system and parse errors carry the offending path.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("{path}: {source}")]
    Protocol {
        path: PathBuf,
        source: ProtocolError,
    },
    #[error("{path}: {source}")]
    Store {
        path: PathBuf,
        source: StoreError,
    },
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    ModelIo(#[from] ModelIoError),
    #[error("{path} line {line}: {message}")]
    ScoreLine {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: no score lines")]
    EmptyScoreFile { path: PathBuf },
    #[error("subsystem '{subsystem}' lists trial ({enroll_id}, {test_id}) twice with different {what} in its {partition} scores")]
    InconsistentDuplicate {
        subsystem: String,
        partition: String,
        enroll_id: String,
        test_id: String,
        what: String,
    },
    #[error("{partition} trial sets differ between subsystems '{left}' and '{right}': {total} trials in the symmetric difference, first shown: {}", .examples.join(", "))]
    CoverageMismatch {
        left: String,
        right: String,
        partition: String,
        total: usize,
        examples: Vec<String>,
    },
    #[error("trial ({enroll_id}, {test_id}) in the {partition} scores is labeled {left_label} by subsystem '{left}' but {right_label} by '{right}'")]
    LabelMismatch {
        left: String,
        right: String,
        partition: String,
        enroll_id: String,
        test_id: String,
        left_label: TrialLabel,
        right_label: TrialLabel,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Configuration for one embedding-level fusion run.
///
/// The run seed is copied over `backend.seed` before training so a single
/// knob controls the whole run; the manifest echoes the effective config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub feature_spec: FeatureSpec,
    pub backend: TrainConfig,
    /// Store name (as referenced by the feature spec) to EMB1 file path.
    pub stores: BTreeMap<String, PathBuf>,
    pub train_trials: PathBuf,
    pub dev_trials: PathBuf,
    pub eval_trials: PathBuf,
    pub seed: u64,
    /// Every artifact lands in this directory under a fixed name.
    pub out_dir: PathBuf,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default)]
    pub pooling: NegativePooling,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        FeatureSpec::new(self.feature_spec.parts.clone())?;
        for part in &self.feature_spec.parts {
            if !self.stores.contains_key(&part.store) {
                return Err(PipelineError::BadConfig(format!(
                    "feature spec references store '{}' but no path is configured for it",
                    part.store
                )));
            }
        }
        Ok(())
    }
}

/// One subsystem's score files, one per partition. The training partition
/// is explicit rather than assumed, so the caller decides which scores fit
/// the second-stage model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsystemScores {
    pub name: String,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub eval: PathBuf,
}

/// Configuration for one score-level fusion run. Subsystem order fixes the
/// column order of the stacked vectors, so the feature dimension equals the
/// number of subsystems.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreFusionConfig {
    pub subsystems: Vec<SubsystemScores>,
    pub backend: TrainConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub label_rule: LabelRule,
    #[serde(default)]
    pub pooling: NegativePooling,
}

impl ScoreFusionConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.subsystems.len() < 2 {
            return Err(PipelineError::BadConfig(format!(
                "score fusion needs at least 2 subsystems, got {}",
                self.subsystems.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for sub in &self.subsystems {
            if sub.name.is_empty() {
                return Err(PipelineError::BadConfig("subsystem with empty name".into()));
            }
            if !seen.insert(sub.name.as_str()) {
                return Err(PipelineError::BadConfig(format!(
                    "duplicate subsystem name '{}'",
                    sub.name
                )));
            }
        }
        Ok(())
    }
}

/// Load any of the JSON config types from a file.
pub fn load_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|source| PipelineError::Json {
        path: path.to_path_buf(),
        source,
    })
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// Read and parse a trial list file.
pub fn load_trials(path: &Path) -> Result<TrialList, PipelineError> {
    let text = read_text(path)?;
    parse_trials(&text).map_err(|source| PipelineError::Protocol {
        path: path.to_path_buf(),
        source,
    })
}

/// Read an EMB1 store file.
pub fn load_store(path: &Path) -> Result<EmbeddingStore, PipelineError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    read_store(&bytes).map_err(|source| PipelineError::Store {
        path: path.to_path_buf(),
        source,
    })
}

/// Format scored trials as score-file lines: `enroll test label score`.
/// Scores print with the shortest representation that parses back to the
/// same value, so writing and re-reading a file is lossless.
pub fn score_lines(entries: &[(TrialRecord, f64)]) -> String {
    let mut out = String::new();
    for (trial, score) in entries {
        out.push_str(&format!(
            "{} {} {} {}\n",
            trial.enroll_id,
            trial.test_id,
            trial.label.as_str(),
            score
        ));
    }
    out
}

/// Parse a score file. Blank lines and `#` comments are skipped, matching
/// the trial list format; each remaining line must hold exactly four
/// whitespace-separated fields with a finite score.
pub fn read_score_file(path: &Path) -> Result<Vec<(TrialRecord, f64)>, PipelineError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = raw_line.trim_end_matches('\r').trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |message: String| PipelineError::ScoreLine {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let label = TrialLabel::from_token(fields[2])
            .ok_or_else(|| err(format!("unknown label '{}'", fields[2])))?;
        let record = TrialRecord::new(fields[0], fields[1], label)
            .map_err(|e| err(e.to_string()))?;
        let score: f64 = fields[3]
            .parse()
            .map_err(|_| err(format!("unparsable score '{}'", fields[3])))?;
        if !score.is_finite() {
            return Err(err(format!("non-finite score '{}'", fields[3])));
        }
        out.push((record, score));
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyScoreFile {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

/// Compute the three EERs for a set of scored trials.
pub fn evaluate_entries(
    entries: &[(TrialRecord, f64)],
    pooling: NegativePooling,
) -> Result<EerReport, PipelineError> {
    let mut set = ScoreSet::new();
    for (trial, score) in entries {
        set.push(trial.clone(), *score)?;
    }
    Ok(sasv_metrics_with(&set, &MetricKind::ALL, pooling)?)
}

/// Score every row of an assembled partition, in trial order. Rows are
/// scored in parallel; the output order never depends on thread count.
pub fn score_partition(
    model: &FusionModel,
    part: &LabeledMatrix,
) -> Result<Vec<(TrialRecord, f64)>, PipelineError> {
    let scores: Vec<f64> = (0..part.x.rows())
        .into_par_iter()
        .map(|i| model.score(part.x.row(i)))
        .collect::<Result<_, TrainError>>()?;
    Ok(part.trial_refs.iter().cloned().zip(scores).collect())
}

/// Everything a fusion run produces, plus the paths it wrote.
#[derive(Debug)]
pub struct FusionRun {
    pub model: FusionModel,
    pub dev_report: EerReport,
    pub eval_report: EerReport,
    pub dev_scores: Vec<(TrialRecord, f64)>,
    pub eval_scores: Vec<(TrialRecord, f64)>,
    pub written: Vec<PathBuf>,
}

/// Run manifest written beside the other artifacts: the effective config,
/// the seed, and a SHA-256 digest of every emitted file.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, String>,
}

/// Digest used for manifest artifact entries.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

/// Write the artifact files plus `manifest.json` into `out_dir`. If any
/// write fails, files already written by this call are removed so a failed
/// run leaves no partial output behind.
fn write_artifacts(
    out_dir: &Path,
    tool: &str,
    seed: u64,
    config_echo: serde_json::Value,
    files: Vec<(&'static str, Vec<u8>)>,
) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let cleanup = |written: &[PathBuf]| {
        for path in written {
            let _ = fs::remove_file(path);
        }
    };
    let mut written = Vec::new();
    let mut artifacts = BTreeMap::new();
    for (name, bytes) in &files {
        let path = out_dir.join(name);
        if let Err(e) = fs::write(&path, bytes) {
            cleanup(&written);
            return Err(io_err(&path, e));
        }
        written.push(path);
        artifacts.insert(name.to_string(), sha256_hex(bytes));
    }
    let manifest = RunManifest {
        tool: tool.to_string(),
        seed,
        config: config_echo,
        artifacts,
    };
    let manifest_bytes =
        serde_json::to_vec_pretty(&manifest).expect("manifest has no unserializable fields");
    let manifest_path = out_dir.join("manifest.json");
    if let Err(e) = fs::write(&manifest_path, &manifest_bytes) {
        cleanup(&written);
        return Err(io_err(&manifest_path, e));
    }
    written.push(manifest_path);
    Ok(written)
}

fn run_and_write(
    tool: &str,
    seed: u64,
    config_echo: serde_json::Value,
    out_dir: &Path,
    backend: &TrainConfig,
    pooling: NegativePooling,
    train_m: &LabeledMatrix,
    dev_m: &LabeledMatrix,
    eval_m: &LabeledMatrix,
) -> Result<FusionRun, PipelineError> {
    let model = train(train_m, backend)?;
    let train_scores = score_partition(&model, train_m)?;
    let dev_scores = score_partition(&model, dev_m)?;
    let eval_scores = score_partition(&model, eval_m)?;
    let dev_report = evaluate_entries(&dev_scores, pooling)?;
    let eval_report = evaluate_entries(&eval_scores, pooling)?;
    let files = vec![
        ("model.fmd1", model_to_bytes(&model)?),
        ("train_scores.txt", score_lines(&train_scores).into_bytes()),
        ("dev_scores.txt", score_lines(&dev_scores).into_bytes()),
        ("eval_scores.txt", score_lines(&eval_scores).into_bytes()),
        (
            "dev_report.json",
            serde_json::to_vec_pretty(&dev_report).expect("report serializes"),
        ),
        (
            "eval_report.json",
            serde_json::to_vec_pretty(&eval_report).expect("report serializes"),
        ),
    ];
    let written = write_artifacts(out_dir, tool, seed, config_echo, files)?;
    Ok(FusionRun {
        model,
        dev_report,
        eval_report,
        dev_scores,
        eval_scores,
        written,
    })
}

/// Train one back-end on concatenated embeddings and score all partitions.
///
/// Training scores are emitted alongside dev and eval so the output
/// directory is directly usable as one subsystem of a score-fusion run.
pub fn run_embedding_fusion(cfg: &PipelineConfig) -> Result<FusionRun, PipelineError> {
    cfg.validate()?;
    let mut effective = cfg.clone();
    effective.backend.seed = effective.seed;

    let train_list = load_trials(&effective.train_trials)?;
    let dev_list = load_trials(&effective.dev_trials)?;
    let eval_list = load_trials(&effective.eval_trials)?;
    let mut stores = HashMap::new();
    for (name, path) in &effective.stores {
        stores.insert(name.clone(), load_store(path)?);
    }
    let spec = FeatureSpec::new(effective.feature_spec.parts.clone())?;
    let train_m = assemble_dataset(&train_list, &stores, &spec, &effective.label_rule)?;
    let dev_m = assemble_dataset(&dev_list, &stores, &spec, &effective.label_rule)?;
    let eval_m = assemble_dataset(&eval_list, &stores, &spec, &effective.label_rule)?;

    let echo = serde_json::to_value(&effective).expect("config serializes");
    run_and_write(
        "embedding-fusion",
        effective.seed,
        echo,
        &effective.out_dir,
        &effective.backend,
        effective.pooling,
        &train_m,
        &dev_m,
        &eval_m,
    )
}

/// Join the subsystems' score files for one partition into a training
/// matrix with one column per subsystem. Row order follows the first
/// subsystem's file; the others are looked up by trial key.
fn stack_partition(
    partition: &str,
    subsystems: &[(String, Vec<(TrialRecord, f64)>)],
    rule: &LabelRule,
) -> Result<LabeledMatrix, PipelineError> {
    let maps: Vec<HashMap<(String, String), (TrialLabel, f64)>> = subsystems
        .iter()
        .map(|(name, entries)| {
            let mut map = HashMap::with_capacity(entries.len());
            for (trial, score) in entries {
                let key = (trial.enroll_id.clone(), trial.test_id.clone());
                if let Some(&(label, prev)) = map.get(&key) {
                    let what = if label != trial.label {
                        Some("labels")
                    } else if prev != *score {
                        Some("scores")
                    } else {
                        None
                    };
                    if let Some(what) = what {
                        return Err(PipelineError::InconsistentDuplicate {
                            subsystem: name.clone(),
                            partition: partition.to_string(),
                            enroll_id: trial.enroll_id.clone(),
                            test_id: trial.test_id.clone(),
                            what: what.to_string(),
                        });
                    }
                } else {
                    map.insert(key, (trial.label, *score));
                }
            }
            Ok(map)
        })
        .collect::<Result<_, PipelineError>>()?;

    let base_keys: BTreeSet<(String, String)> = maps[0].keys().cloned().collect();
    for (j, map) in maps.iter().enumerate().skip(1) {
        let keys: BTreeSet<(String, String)> = map.keys().cloned().collect();
        if keys != base_keys {
            let mut examples = Vec::new();
            let mut total = 0usize;
            for key in base_keys.difference(&keys) {
                total += 1;
                if examples.len() < 10 {
                    examples.push(format!(
                        "({}, {}) only in '{}'",
                        key.0, key.1, subsystems[0].0
                    ));
                }
            }
            for key in keys.difference(&base_keys) {
                total += 1;
                if examples.len() < 10 {
                    examples.push(format!(
                        "({}, {}) only in '{}'",
                        key.0, key.1, subsystems[j].0
                    ));
                }
            }
            return Err(PipelineError::CoverageMismatch {
                left: subsystems[0].0.clone(),
                right: subsystems[j].0.clone(),
                partition: partition.to_string(),
                total,
                examples,
            });
        }
    }

    let base = &subsystems[0].1;
    let mut x = Matrix::zeros(base.len(), subsystems.len());
    let mut labels = Vec::with_capacity(base.len());
    let mut refs = Vec::with_capacity(base.len());
    for (i, (trial, score)) in base.iter().enumerate() {
        let key = (trial.enroll_id.clone(), trial.test_id.clone());
        x.set(i, 0, *score);
        for (j, map) in maps.iter().enumerate().skip(1) {
            let &(label, other_score) = &map[&key];
            if label != trial.label {
                return Err(PipelineError::LabelMismatch {
                    left: subsystems[0].0.clone(),
                    right: subsystems[j].0.clone(),
                    partition: partition.to_string(),
                    enroll_id: trial.enroll_id.clone(),
                    test_id: trial.test_id.clone(),
                    left_label: trial.label,
                    right_label: label,
                });
            }
            x.set(i, j, other_score);
        }
        labels.push(if rule.matches(trial.label) { 1.0 } else { 0.0 });
        refs.push(trial.clone());
    }
    Ok(LabeledMatrix {
        x,
        labels,
        trial_refs: refs,
    })
}

/// Train a second-stage model on stacked subsystem scores.
///
/// All subsystems must cover identical trial sets in every partition; a
/// mismatch reports the first entries of the symmetric difference.
pub fn run_score_fusion(cfg: &ScoreFusionConfig) -> Result<FusionRun, PipelineError> {
    cfg.validate()?;
    let mut effective = cfg.clone();
    effective.backend.seed = effective.seed;

    let mut train_subs = Vec::new();
    let mut dev_subs = Vec::new();
    let mut eval_subs = Vec::new();
    for sub in &effective.subsystems {
        train_subs.push((sub.name.clone(), read_score_file(&sub.train)?));
        dev_subs.push((sub.name.clone(), read_score_file(&sub.dev)?));
        eval_subs.push((sub.name.clone(), read_score_file(&sub.eval)?));
    }
    let train_m = stack_partition("train", &train_subs, &effective.label_rule)?;
    let dev_m = stack_partition("dev", &dev_subs, &effective.label_rule)?;
    let eval_m = stack_partition("eval", &eval_subs, &effective.label_rule)?;

    let echo = serde_json::to_value(&effective).expect("config serializes");
    run_and_write(
        "score-fusion",
        effective.seed,
        echo,
        &effective.out_dir,
        &effective.backend,
        effective.pooling,
        &train_m,
        &dev_m,
        &eval_m,
    )
}

/// Parameters of the synthetic corpus generator.
///
/// Utterance pools are drawn per partition and per speaker, so train, dev,
/// and eval never share an utterance. `trials_per_partition` is the number
/// of sampled trials for train, dev, and eval in that order;
/// `spoof_fraction` of each partition's trials are spoofs and the rest
/// split evenly between targets and nontargets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_speakers: usize,
    /// Pool size per speaker, partition, and utterance kind (enrollment,
    /// bonafide test, spoofed test).
    pub utterances_per_speaker: usize,
    pub spoof_fraction: f64,
    pub asv_dim: usize,
    pub cm_dim: usize,
    /// Magnitude of the speaker structure in ASV space: cluster mean scale,
    /// or the sign amplitude in `xor_mode`.
    pub speaker_scale: f64,
    /// Per-coordinate noise standard deviation for every embedding.
    pub noise_scale: f64,
    /// Added to every countermeasure coordinate of spoofed test utterances.
    pub spoof_shift: f64,
    /// Encode speaker identity as coordinate signs instead of cluster
    /// means. Sign agreement between enroll and test is a parity structure
    /// that no linear function of the concatenated vectors can express.
    pub xor_mode: bool,
    pub trials_per_partition: [usize; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            utterances_per_speaker: 40,
            spoof_fraction: 0.3,
            asv_dim: 12,
            cm_dim: 6,
            speaker_scale: 2.0,
            noise_scale: 1.0,
            spoof_shift: 3.0,
            xor_mode: false,
            trials_per_partition: [3000, 1500, 1500],
            seed: 0,
        }
    }
}

/// Store names used by the generator and by [`SyntheticData::feature_spec`].
pub const STORE_ASV_ENROLL: &str = "asv_enroll";
pub const STORE_ASV_TEST: &str = "asv_test";
pub const STORE_CM_TEST: &str = "cm_test";

fn xor_bits(n_speakers: usize) -> usize {
    let mut bits = 1;
    while (1usize << bits) < n_speakers {
        bits += 1;
    }
    bits
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::BadConfig(msg));
        if self.n_speakers < 2 {
            return bad(format!("n_speakers must be at least 2, got {}", self.n_speakers));
        }
        if self.utterances_per_speaker == 0 {
            return bad("utterances_per_speaker must be positive".into());
        }
        if self.asv_dim == 0 || self.cm_dim == 0 {
            return bad("embedding dimensions must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.spoof_fraction) {
            return bad(format!(
                "spoof_fraction must lie in [0, 1], got {}",
                self.spoof_fraction
            ));
        }
        for (name, value) in [
            ("speaker_scale", self.speaker_scale),
            ("noise_scale", self.noise_scale),
            ("spoof_shift", self.spoof_shift),
        ] {
            if !value.is_finite() || value < 0.0 {
                return bad(format!("{name} must be finite and nonnegative, got {value}"));
            }
        }
        if self.xor_mode && self.asv_dim < xor_bits(self.n_speakers) {
            return bad(format!(
                "xor_mode with {} speakers needs asv_dim >= {}, got {}",
                self.n_speakers,
                xor_bits(self.n_speakers),
                self.asv_dim
            ));
        }
        if self.trials_per_partition.iter().any(|&n| n == 0) {
            return bad("every partition needs at least one trial".into());
        }
        Ok(())
    }
}

/// A generated corpus: three embedding stores plus one trial list per
/// partition.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub stores: BTreeMap<String, EmbeddingStore>,
    pub train: TrialList,
    pub dev: TrialList,
    pub eval: TrialList,
}

/// Canonical file locations of a corpus written with
/// [`SyntheticData::write_to_dir`].
#[derive(Debug, Clone)]
pub struct CorpusPaths {
    pub stores: BTreeMap<String, PathBuf>,
    pub train_trials: PathBuf,
    pub dev_trials: PathBuf,
    pub eval_trials: PathBuf,
}

impl SyntheticData {
    /// The concatenation recipe matching the generated stores: enrollment
    /// ASV embedding, test ASV embedding, test countermeasure embedding.
    pub fn feature_spec(&self) -> FeatureSpec {
        let part = |store: &str, role: KeyRole| FeaturePart {
            store: store.to_string(),
            role,
            expected_dim: self.stores[store].dim(),
        };
        FeatureSpec::new(vec![
            part(STORE_ASV_ENROLL, KeyRole::Enroll),
            part(STORE_ASV_TEST, KeyRole::Test),
            part(STORE_CM_TEST, KeyRole::Test),
        ])
        .expect("generator spec is nonempty and duplicate-free")
    }

    /// Write the stores and trial lists under their canonical names.
    pub fn write_to_dir(&self, dir: &Path) -> Result<CorpusPaths, PipelineError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut store_paths = BTreeMap::new();
        for (name, store) in &self.stores {
            let path = dir.join(format!("{name}.emb1"));
            let bytes = write_store(store).map_err(|source| PipelineError::Store {
                path: path.clone(),
                source,
            })?;
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
            store_paths.insert(name.clone(), path);
        }
        let lists = [
            ("train.txt", &self.train),
            ("dev.txt", &self.dev),
            ("eval.txt", &self.eval),
        ];
        let mut list_paths = Vec::new();
        for (file, list) in lists {
            let path = dir.join(file);
            fs::write(&path, write_trials(list)).map_err(|e| io_err(&path, e))?;
            list_paths.push(path);
        }
        Ok(CorpusPaths {
            stores: store_paths,
            train_trials: list_paths[0].clone(),
            dev_trials: list_paths[1].clone(),
            eval_trials: list_paths[2].clone(),
        })
    }
}

struct UtterancePools {
    /// Indexed `[speaker]`, each holding that speaker's utterance ids.
    enroll: Vec<Vec<String>>,
    bonafide: Vec<Vec<String>>,
    spoof: Vec<Vec<String>>,
}

struct Sampler<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha20Rng,
    noise: Normal<f64>,
    /// One mean vector per speaker; empty in `xor_mode`.
    speaker_means: Vec<Vec<f64>>,
    bits: usize,
}

impl<'a> Sampler<'a> {
    fn new(spec: &'a SyntheticSpec) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        let noise = Normal::new(0.0, spec.noise_scale).expect("validated noise scale");
        let mut speaker_means = Vec::new();
        if !spec.xor_mode {
            let cluster = Normal::new(0.0, spec.speaker_scale.max(f64::MIN_POSITIVE))
                .expect("validated speaker scale");
            for _ in 0..spec.n_speakers {
                speaker_means.push((0..spec.asv_dim).map(|_| cluster.sample(&mut rng)).collect());
            }
        }
        Self {
            spec,
            rng,
            noise,
            speaker_means,
            bits: xor_bits(spec.n_speakers),
        }
    }

    fn asv(&mut self, speaker: usize) -> Vec<f32> {
        let d = self.spec.asv_dim;
        let mut v = Vec::with_capacity(d);
        for j in 0..d {
            let mean = if self.spec.xor_mode {
                if j < self.bits {
                    let sign = if (speaker >> j) & 1 == 1 { 1.0 } else { -1.0 };
                    self.spec.speaker_scale * sign
                } else {
                    0.0
                }
            } else {
                self.speaker_means[speaker][j]
            };
            v.push((mean + self.noise.sample(&mut self.rng)) as f32);
        }
        v
    }

    fn cm(&mut self, spoofed: bool) -> Vec<f32> {
        let shift = if spoofed { self.spec.spoof_shift } else { 0.0 };
        (0..self.spec.cm_dim)
            .map(|_| (shift + self.noise.sample(&mut self.rng)) as f32)
            .collect()
    }
}

/// Generate a seeded synthetic corpus. The same spec always produces
/// byte-identical stores and trial lists.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, PipelineError> {
    spec.validate()?;
    let mut sampler = Sampler::new(spec);
    let mut asv_enroll = EmbeddingStore::new(STORE_ASV_ENROLL, spec.asv_dim);
    let mut asv_test = EmbeddingStore::new(STORE_ASV_TEST, spec.asv_dim);
    let mut cm_test = EmbeddingStore::new(STORE_CM_TEST, spec.cm_dim);
    let insert = |store: &mut EmbeddingStore, id: String, values: Vec<f32>| {
        store
            .insert(Embedding { id, values })
            .expect("generated ids are unique and dimensions fixed");
    };

    let partitions = [("tr", spec.trials_per_partition[0]),
        ("dv", spec.trials_per_partition[1]),
        ("ev", spec.trials_per_partition[2])];
    let mut lists = Vec::new();
    for (tag, n_trials) in partitions {
        let mut pools = UtterancePools {
            enroll: vec![Vec::new(); spec.n_speakers],
            bonafide: vec![Vec::new(); spec.n_speakers],
            spoof: vec![Vec::new(); spec.n_speakers],
        };
        for s in 0..spec.n_speakers {
            for u in 0..spec.utterances_per_speaker {
                let enroll_id = format!("s{s:03}-{tag}-enr{u:03}");
                let values = sampler.asv(s);
                insert(&mut asv_enroll, enroll_id.clone(), values);
                pools.enroll[s].push(enroll_id);

                let test_id = format!("s{s:03}-{tag}-tst{u:03}");
                let values = sampler.asv(s);
                insert(&mut asv_test, test_id.clone(), values);
                let values = sampler.cm(false);
                insert(&mut cm_test, test_id.clone(), values);
                pools.bonafide[s].push(test_id);

                if spec.spoof_fraction > 0.0 {
                    // A spoofed utterance imitates its target speaker, so
                    // its ASV embedding follows the same cluster and only
                    // the countermeasure coordinates give it away.
                    let spoof_id = format!("s{s:03}-{tag}-spf{u:03}");
                    let values = sampler.asv(s);
                    insert(&mut asv_test, spoof_id.clone(), values);
                    let values = sampler.cm(true);
                    insert(&mut cm_test, spoof_id.clone(), values);
                    pools.spoof[s].push(spoof_id);
                }
            }
        }

        let n_spoof = (n_trials as f64 * spec.spoof_fraction).round() as usize;
        let n_rest = n_trials - n_spoof;
        let n_target = n_rest.div_ceil(2);
        let n_nontarget = n_rest - n_target;
        let mut labels = Vec::with_capacity(n_trials);
        labels.extend(std::iter::repeat(TrialLabel::Target).take(n_target));
        labels.extend(std::iter::repeat(TrialLabel::NonTarget).take(n_nontarget));
        labels.extend(std::iter::repeat(TrialLabel::Spoof).take(n_spoof));
        labels.shuffle(&mut sampler.rng);

        let mut list = TrialList::new();
        let u = spec.utterances_per_speaker;
        for label in labels {
            let s = sampler.rng.gen_range(0..spec.n_speakers);
            let enroll = pools.enroll[s][sampler.rng.gen_range(0..u)].clone();
            let test = match label {
                TrialLabel::Target => pools.bonafide[s][sampler.rng.gen_range(0..u)].clone(),
                TrialLabel::NonTarget => {
                    let other = (s + 1 + sampler.rng.gen_range(0..spec.n_speakers - 1))
                        % spec.n_speakers;
                    pools.bonafide[other][sampler.rng.gen_range(0..u)].clone()
                }
                TrialLabel::Spoof => pools.spoof[s][sampler.rng.gen_range(0..u)].clone(),
            };
            list.push(TrialRecord::new(enroll, test, label).expect("generated ids are valid"));
        }
        lists.push(list);
    }

    let mut stores = BTreeMap::new();
    stores.insert(STORE_ASV_ENROLL.to_string(), asv_enroll);
    stores.insert(STORE_ASV_TEST.to_string(), asv_test);
    stores.insert(STORE_CM_TEST.to_string(), cm_test);
    let mut lists = lists.into_iter();
    Ok(SyntheticData {
        stores,
        train: lists.next().unwrap(),
        dev: lists.next().unwrap(),
        eval: lists.next().unwrap(),
    })
}
