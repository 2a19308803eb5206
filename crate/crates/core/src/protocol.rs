//! Trial lists and label keys.
//!
//! A trial file is line-oriented UTF-8 with three whitespace-separated
//! columns per data line: `enroll_id test_id label`. Labels are `target`,
//! `nontarget`, or `spoof`. Lines starting with `#` and blank lines are
//! ignored. LF and CRLF are both accepted; LF is emitted.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth class of one verification trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    /// Same speaker, bonafide test utterance.
    Target,
    /// Different speaker, bonafide test utterance.
    NonTarget,
    /// Spoofed test utterance.
    Spoof,
}

impl TrialLabel {
    /// All labels, in serialization order.
    pub const ALL: [TrialLabel; 3] = [TrialLabel::Target, TrialLabel::NonTarget, TrialLabel::Spoof];

    /// Lowercase token used in trial and score files.
    pub fn as_str(self) -> &'static str {
        match self {
            TrialLabel::Target => "target",
            TrialLabel::NonTarget => "nontarget",
            TrialLabel::Spoof => "spoof",
        }
    }

    /// Parse a label token. Returns `None` for unknown tokens.
    pub fn from_token(tok: &str) -> Option<Self> {
        match tok {
            "target" => Some(TrialLabel::Target),
            "nontarget" => Some(TrialLabel::NonTarget),
            "spoof" => Some(TrialLabel::Spoof),
            _ => None,
        }
    }
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One verification trial: an enrollment speaker, a test utterance, and the
/// ground-truth label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrialRecord {
    pub enroll_id: String,
    pub test_id: String,
    pub label: TrialLabel,
}

impl TrialRecord {
    /// Build a record, validating that identifiers are nonempty and carry no
    /// internal whitespace.
    pub fn new(
        enroll_id: impl Into<String>,
        test_id: impl Into<String>,
        label: TrialLabel,
    ) -> Result<Self, ProtocolError> {
        let enroll_id = enroll_id.into();
        let test_id = test_id.into();
        for (field, value) in [("enroll_id", &enroll_id), ("test_id", &test_id)] {
            if value.is_empty() {
                return Err(ProtocolError::EmptyIdentifier { field });
            }
            if value.chars().any(char::is_whitespace) {
                return Err(ProtocolError::WhitespaceInIdentifier {
                    field,
                    value: value.clone(),
                });
            }
        }
        Ok(Self {
            enroll_id,
            test_id,
            label,
        })
    }
}

/// Per-label trial tallies.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub target: usize,
    pub nontarget: usize,
    pub spoof: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.target + self.nontarget + self.spoof
    }

    pub fn get(&self, label: TrialLabel) -> usize {
        match label {
            TrialLabel::Target => self.target,
            TrialLabel::NonTarget => self.nontarget,
            TrialLabel::Spoof => self.spoof,
        }
    }

    pub(crate) fn bump(&mut self, label: TrialLabel) {
        match label {
            TrialLabel::Target => self.target += 1,
            TrialLabel::NonTarget => self.nontarget += 1,
            TrialLabel::Spoof => self.spoof += 1,
        }
    }
}

/// Ordered sequence of trials plus per-label tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    records: Vec<TrialRecord>,
    counts: LabelCounts,
}

impl TrialList {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build a list from records, recomputing the tallies.
    pub fn from_records(records: Vec<TrialRecord>) -> Self {
        let mut counts = LabelCounts::default();
        for r in &records {
            counts.bump(r.label);
        }
        Self { records, counts }
    }

    pub fn push(&mut self, record: TrialRecord) {
        self.counts.bump(record.label);
        self.records.push(record);
    }

    pub fn records(&self) -> &[TrialRecord] {
        &self.records
    }

    pub fn counts(&self) -> LabelCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TrialRecord> {
        self.records.iter()
    }
}

impl<'a> IntoIterator for &'a TrialList {
    type Item = &'a TrialRecord;
    type IntoIter = std::slice::Iter<'a, TrialRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Errors raised while parsing or constructing trial lists.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("line {line}: expected 3 whitespace-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("unknown label '{token}' at line {line}")]
    UnknownLabel { line: usize, token: String },
    #[error("line {line}: duplicate pair ({enroll_id}, {test_id}) with contradictory labels {first} and {second}")]
    ContradictoryDuplicate {
        line: usize,
        enroll_id: String,
        test_id: String,
        first: TrialLabel,
        second: TrialLabel,
    },
    #[error("{field} must be nonempty")]
    EmptyIdentifier { field: &'static str },
    #[error("{field} '{value}' contains whitespace")]
    WhitespaceInIdentifier { field: &'static str, value: String },
}

/// Parse a trial file. Order is preserved; every rejection carries the
/// 1-based line number. Duplicate (enroll, test) pairs are allowed only when
/// their labels agree.
pub fn parse_trials(text: &str) -> Result<TrialList, ProtocolError> {
    let mut list = TrialList::new();
    let mut seen: HashMap<(String, String), TrialLabel> = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw_line.trim_end_matches('\r');
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(ProtocolError::FieldCount {
                line: line_no,
                found: fields.len(),
            });
        }
        let label = TrialLabel::from_token(fields[2]).ok_or_else(|| ProtocolError::UnknownLabel {
            line: line_no,
            token: fields[2].to_string(),
        })?;
        let record = TrialRecord::new(fields[0], fields[1], label)?;
        let key = (record.enroll_id.clone(), record.test_id.clone());
        if let Some(&prev) = seen.get(&key) {
            if prev != label {
                return Err(ProtocolError::ContradictoryDuplicate {
                    line: line_no,
                    enroll_id: record.enroll_id,
                    test_id: record.test_id,
                    first: prev,
                    second: label,
                });
            }
        } else {
            seen.insert(key, label);
        }
        list.push(record);
    }
    Ok(list)
}

/// Serialize a trial list; `parse_trials(write_trials(l)) == l`.
pub fn write_trials(list: &TrialList) -> String {
    let mut out = String::new();
    for r in list {
        out.push_str(&r.enroll_id);
        out.push(' ');
        out.push_str(&r.test_id);
        out.push(' ');
        out.push_str(r.label.as_str());
        out.push('\n');
    }
    out
}
