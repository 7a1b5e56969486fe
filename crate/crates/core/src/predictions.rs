//! Per-instance predicted labels with run provenance, plus CSV/JSONL I/O.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::{parse_label, Label, LabelFamily, TaxonomyError};

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("duplicate prediction for id {0:?}")]
    DuplicateId(String),
    #[error("label {label} does not belong to the {expected} family")]
    WrongFamily { label: Label, expected: LabelFamily },
    #[error(transparent)]
    Label(#[from] TaxonomyError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("refusing to write an empty prediction set")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionFormat {
    Csv,
    Jsonl,
}

impl PredictionFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(PredictionFormat::Csv),
            "jsonl" | "json" => Some(PredictionFormat::Jsonl),
            _ => None,
        }
    }
}

/// Predicted labels keyed by instance id, in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub run_id: String,
    pub seed: Option<u64>,
    pub family: LabelFamily,
    labels: IndexMap<String, Label>,
    #[serde(default, skip_serializing_if = "IndexMap::is_empty")]
    scores: IndexMap<String, Vec<f64>>,
}

impl PredictionSet {
    pub fn new(run_id: impl Into<String>, seed: Option<u64>, family: LabelFamily) -> Self {
        Self {
            run_id: run_id.into(),
            seed,
            family,
            labels: IndexMap::new(),
            scores: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, label: Label) -> Result<(), PredictionError> {
        if label.family() != self.family {
            return Err(PredictionError::WrongFamily {
                label,
                expected: self.family,
            });
        }
        let id = id.into();
        if self.labels.contains_key(&id) {
            return Err(PredictionError::DuplicateId(id));
        }
        self.labels.insert(id, label);
        Ok(())
    }

    pub fn insert_with_scores(
        &mut self,
        id: impl Into<String>,
        label: Label,
        scores: Vec<f64>,
    ) -> Result<(), PredictionError> {
        let id = id.into();
        self.insert(id.clone(), label)?;
        self.scores.insert(id, scores);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<Label> {
        self.labels.get(id).copied()
    }

    pub fn scores(&self, id: &str) -> Option<&[f64]> {
        self.scores.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Label)> {
        self.labels.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Clarity predictions implied by these labels (identity for clarity sets,
    /// the taxonomy parent for evasion sets).
    pub fn derived_clarity(&self) -> PredictionSet {
        let mut out = PredictionSet::new(self.run_id.clone(), self.seed, LabelFamily::Clarity);
        for (id, label) in self.iter() {
            out.labels.insert(id.to_string(), Label::Clarity(label.to_clarity()));
        }
        out
    }

    pub fn write(&self, format: PredictionFormat, path: &Path) -> Result<(), PredictionError> {
        if self.is_empty() {
            return Err(PredictionError::Empty);
        }
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(self.render(format).as_bytes())?;
        out.flush()?;
        Ok(())
    }

    /// File contents for `format`; labels use display strings.
    pub fn render(&self, format: PredictionFormat) -> String {
        let mut out = String::new();
        match format {
            PredictionFormat::Csv => {
                let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
                w.write_record(["id", "label"]).expect("in-memory write");
                for (id, label) in self.iter() {
                    w.write_record([id, label.display_name()]).expect("in-memory write");
                }
                out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
            }
            PredictionFormat::Jsonl => {
                for (id, label) in self.iter() {
                    let line = serde_json::json!({"id": id, "label": label.display_name()});
                    out.push_str(&line.to_string());
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn read(
        path: &Path,
        format: PredictionFormat,
        family: LabelFamily,
        run_id: impl Into<String>,
        seed: Option<u64>,
    ) -> Result<PredictionSet, PredictionError> {
        let mut set = PredictionSet::new(run_id, seed, family);
        match format {
            PredictionFormat::Csv => {
                let mut reader = csv::Reader::from_path(path).map_err(|e| PredictionError::Parse {
                    line: 0,
                    reason: e.to_string(),
                })?;
                for (i, rec) in reader.records().enumerate() {
                    let rec = rec.map_err(|e| PredictionError::Parse {
                        line: i + 2,
                        reason: e.to_string(),
                    })?;
                    let (id, label) = match (rec.get(0), rec.get(1)) {
                        (Some(id), Some(label)) => (id, label),
                        _ => {
                            return Err(PredictionError::Parse {
                                line: i + 2,
                                reason: "expected two columns".into(),
                            })
                        }
                    };
                    set.insert(id, parse_label(label, family)?)?;
                }
            }
            PredictionFormat::Jsonl => {
                #[derive(Deserialize)]
                struct Row {
                    id: String,
                    label: String,
                }
                for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let row: Row = serde_json::from_str(&line).map_err(|e| PredictionError::Parse {
                        line: i + 1,
                        reason: e.to_string(),
                    })?;
                    set.insert(row.id, parse_label(&row.label, family)?)?;
                }
            }
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::{ClarityLabel, EvasionLabel};
    use proptest::prelude::*;

    fn sample() -> PredictionSet {
        let mut p = PredictionSet::new("run", Some(13), LabelFamily::Evasion);
        p.insert("b", EvasionLabel::Partial.into()).unwrap();
        p.insert("a", EvasionLabel::Dodging.into()).unwrap();
        p
    }

    #[test]
    fn csv_layout() {
        let text = sample().render(PredictionFormat::Csv);
        assert_eq!(text, "id,label\nb,Partial/half-answer\na,Dodging\n");
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn jsonl_layout() {
        let text = sample().render(PredictionFormat::Jsonl);
        assert_eq!(
            text,
            "{\"id\":\"b\",\"label\":\"Partial/half-answer\"}\n{\"id\":\"a\",\"label\":\"Dodging\"}\n"
        );
    }

    #[test]
    fn rejects_family_mismatch_and_duplicates() {
        let mut p = sample();
        assert!(matches!(
            p.insert("c", ClarityLabel::Ambivalent.into()),
            Err(PredictionError::WrongFamily { .. })
        ));
        assert!(matches!(p.insert("a", EvasionLabel::Explicit.into()), Err(PredictionError::DuplicateId(_))));
    }

    #[test]
    fn derived_clarity_maps_each_label() {
        let d = sample().derived_clarity();
        assert_eq!(d.family, LabelFamily::Clarity);
        assert_eq!(d.get("a"), Some(ClarityLabel::Ambivalent.into()));
        assert_eq!(d.ids().collect::<Vec<_>>(), vec!["b", "a"]);
    }

    #[test]
    fn empty_write_refused() {
        let p = PredictionSet::new("r", None, LabelFamily::Clarity);
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(matches!(p.write(PredictionFormat::Csv, f.path()), Err(PredictionError::Empty)));
    }

    proptest! {
        #[test]
        fn write_read_round_trip(labels in proptest::collection::vec(0usize..9, 1..40), csv in any::<bool>()) {
            let mut p = PredictionSet::new("r", Some(1), LabelFamily::Evasion);
            for (i, l) in labels.iter().enumerate() {
                p.insert(format!("id,{i}\"x"), EvasionLabel::ALL[*l].into()).unwrap();
            }
            let format = if csv { PredictionFormat::Csv } else { PredictionFormat::Jsonl };
            let f = tempfile::NamedTempFile::new().unwrap();
            p.write(format, f.path()).unwrap();
            let bytes = std::fs::read(f.path()).unwrap();
            let back = PredictionSet::read(f.path(), format, LabelFamily::Evasion, "r", Some(1)).unwrap();
            prop_assert_eq!(&back, &p);
            back.write(format, f.path()).unwrap();
            prop_assert_eq!(std::fs::read(f.path()).unwrap(), bytes);
        }
    }
}
