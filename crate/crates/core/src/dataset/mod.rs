//! Train/test instance schemas, JSONL loading, and label statistics.
//!
//! Training records carry one evasion label; test records carry an ordered
//! triple of annotator labels (A1, A2, A3). Both share the canonical JSONL
//! schema below; `import` converts the published dataset's column layout.
//!
//! ```text
//! train: {"id", "question", "answer", "clarity", "evasion",
//!         "president"?, "date"?, "multiple_questions"?, "affirmative_question"?}
//! test:  {"id", "question", "answer", "clarity", "evasion_annotations": [a1, a2, a3]}
//! ```

pub mod import;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{ClarityLabel, EvasionLabel, Label, LabelFamily};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("clarity label inconsistent with evasion label for ids {0:?}")]
    LabelInconsistency(Vec<String>),
    #[error("instance {0:?} must carry exactly three evasion annotations")]
    WrongAnnotatorCount(String),
    #[error("empty dataset")]
    EmptyDataset,
}

/// What to do with training rows whose clarity label disagrees with the
/// taxonomy parent of their evasion label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InconsistencyPolicy {
    #[default]
    Fail,
    WarnAndKeep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainInstance {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub clarity: ClarityLabel,
    pub evasion: EvasionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub president: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiple_questions: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub affirmative_question: Option<bool>,
}

impl TrainInstance {
    pub fn is_consistent(&self) -> bool {
        self.evasion.clarity() == self.clarity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestInstance {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub clarity: ClarityLabel,
    pub evasion_annotations: [EvasionLabel; 3],
}

#[derive(Deserialize)]
struct RawTestRecord {
    id: String,
    question: String,
    answer: String,
    clarity: ClarityLabel,
    evasion_annotations: Vec<EvasionLabel>,
}

/// Common view over train and test instances used by statistics and
/// preprocessing.
pub trait Annotated {
    fn id(&self) -> &str;
    fn question(&self) -> &str;
    fn answer(&self) -> &str;
    fn clarity(&self) -> ClarityLabel;
    /// One label for training rows, three (A1..A3) for test rows.
    fn evasion_labels(&self) -> &[EvasionLabel];
    fn president(&self) -> Option<&str> {
        None
    }
}

impl Annotated for TrainInstance {
    fn id(&self) -> &str {
        &self.id
    }
    fn question(&self) -> &str {
        &self.question
    }
    fn answer(&self) -> &str {
        &self.answer
    }
    fn clarity(&self) -> ClarityLabel {
        self.clarity
    }
    fn evasion_labels(&self) -> &[EvasionLabel] {
        std::slice::from_ref(&self.evasion)
    }
    fn president(&self) -> Option<&str> {
        self.president.as_deref()
    }
}

impl Annotated for TestInstance {
    fn id(&self) -> &str {
        &self.id
    }
    fn question(&self) -> &str {
        &self.question
    }
    fn answer(&self) -> &str {
        &self.answer
    }
    fn clarity(&self) -> ClarityLabel {
        self.clarity
    }
    fn evasion_labels(&self) -> &[EvasionLabel] {
        &self.evasion_annotations
    }
}

fn read_records<T, F>(source: &Path, mut parse: F) -> Result<Vec<T>, DatasetError>
where
    F: FnMut(usize, &str) -> Result<T, DatasetError>,
{
    let reader = BufReader::new(File::open(source)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(i + 1, &line)?);
    }
    Ok(out)
}

fn check_text(line: usize, field: &str, value: &str) -> Result<(), DatasetError> {
    if value.trim().is_empty() {
        return Err(DatasetError::Parse {
            line,
            reason: format!("field {field:?} is empty"),
        });
    }
    Ok(())
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), DatasetError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(DatasetError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

pub fn load_training(source: &Path) -> Result<Vec<TrainInstance>, DatasetError> {
    load_training_with(source, InconsistencyPolicy::Fail)
}

pub fn load_training_with(
    source: &Path,
    policy: InconsistencyPolicy,
) -> Result<Vec<TrainInstance>, DatasetError> {
    let instances = read_records(source, |line, text| {
        let inst: TrainInstance = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
        check_text(line, "question", &inst.question)?;
        check_text(line, "answer", &inst.answer)?;
        Ok(inst)
    })?;
    validate_training(&instances, policy)?;
    Ok(instances)
}

/// Id uniqueness and taxonomy consistency checks shared by the loader and
/// the import adapter.
pub fn validate_training(
    instances: &[TrainInstance],
    policy: InconsistencyPolicy,
) -> Result<(), DatasetError> {
    check_unique(instances.iter().map(|i| i.id.as_str()))?;
    let inconsistent: Vec<String> = instances
        .iter()
        .filter(|i| !i.is_consistent())
        .map(|i| i.id.clone())
        .collect();
    if !inconsistent.is_empty() {
        match policy {
            InconsistencyPolicy::Fail => return Err(DatasetError::LabelInconsistency(inconsistent)),
            InconsistencyPolicy::WarnAndKeep => {
                log::warn!(
                    "{} training rows have clarity inconsistent with evasion: {:?}",
                    inconsistent.len(),
                    inconsistent
                );
            }
        }
    }
    Ok(())
}

pub fn load_test(source: &Path) -> Result<Vec<TestInstance>, DatasetError> {
    let instances = read_records(source, |line, text| {
        let raw: RawTestRecord = serde_json::from_str(text).map_err(|e| DatasetError::Parse {
            line,
            reason: e.to_string(),
        })?;
        check_text(line, "question", &raw.question)?;
        check_text(line, "answer", &raw.answer)?;
        let evasion_annotations: [EvasionLabel; 3] = raw
            .evasion_annotations
            .try_into()
            .map_err(|_| DatasetError::WrongAnnotatorCount(raw.id.clone()))?;
        Ok(TestInstance {
            id: raw.id,
            question: raw.question,
            answer: raw.answer,
            clarity: raw.clarity,
            evasion_annotations,
        })
    })?;
    check_unique(instances.iter().map(|i| i.id.as_str()))?;
    Ok(instances)
}

/// Writes instances as canonical JSONL, one record per line.
pub fn write_jsonl<T: Serialize>(instances: &[T], dest: &Path) -> Result<(), DatasetError> {
    let mut out = std::io::BufWriter::new(File::create(dest)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Label counts and fractions for one label family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub family: LabelFamily,
    /// Number of label observations counted (instances × labels per instance).
    pub total: usize,
    /// Counts keyed by display name, in taxonomy order, including zeros.
    pub counts: IndexMap<String, usize>,
    pub fractions: IndexMap<String, f64>,
    /// Instances per president; absent presidents are not counted.
    pub presidents: BTreeMap<String, usize>,
}

impl DatasetSummary {
    pub fn count(&self, label: Label) -> usize {
        self.counts.get(label.display_name()).copied().unwrap_or(0)
    }

    pub fn fraction(&self, label: Label) -> f64 {
        self.fractions.get(label.display_name()).copied().unwrap_or(0.0)
    }

    /// Counts as a vector in taxonomy order.
    pub fn count_vector(&self) -> Vec<u64> {
        self.family
            .labels()
            .into_iter()
            .map(|l| self.count(l) as u64)
            .collect()
    }
}

pub fn class_distribution<T: Annotated>(
    instances: &[T],
    family: LabelFamily,
) -> Result<DatasetSummary, DatasetError> {
    if instances.is_empty() {
        return Err(DatasetError::EmptyDataset);
    }
    let mut counts = vec![0usize; family.num_labels()];
    let mut presidents = BTreeMap::new();
    for inst in instances {
        match family {
            LabelFamily::Clarity => counts[inst.clarity().index()] += 1,
            LabelFamily::Evasion => {
                for e in inst.evasion_labels() {
                    counts[e.index()] += 1;
                }
            }
        }
        if let Some(p) = inst.president() {
            *presidents.entry(p.to_string()).or_insert(0) += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let labels = family.labels();
    Ok(DatasetSummary {
        family,
        total,
        counts: labels
            .iter()
            .map(|l| (l.display_name().to_string(), counts[l.index()]))
            .collect(),
        fractions: labels
            .iter()
            .map(|l| (l.display_name().to_string(), counts[l.index()] as f64 / total as f64))
            .collect(),
        presidents,
    })
}

/// Label held by at least two of the three annotators, if any.
pub fn majority_evasion(t: &TestInstance) -> Option<EvasionLabel> {
    let [a, b, c] = t.evasion_annotations;
    if a == b || a == c {
        Some(a)
    } else if b == c {
        Some(b)
    } else {
        None
    }
}
