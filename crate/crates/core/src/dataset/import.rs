//! Adapter from the published QEvasion column layout to the canonical schema.
//!
//! Accepts CSV (with header row) or JSONL exports. Recognised columns:
//! `index`, `question` (falls back to `interview_question`), `interview_answer`
//! (falls back to `answer`), `clarity_label`, `evasion_label`,
//! `annotator1`..`annotator3`, `president`, `date`, `multiple_questions`,
//! `affirmative_questions`.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDate;
use indexmap::IndexMap;
use serde_json::Value;

use super::{validate_training, DatasetError, InconsistencyPolicy, TestInstance, TrainInstance};
use crate::taxonomy::{parse_clarity, parse_evasion, EvasionLabel};

type Row = IndexMap<String, String>;

fn value_to_string(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn read_rows(path: &Path) -> Result<Vec<Row>, DatasetError> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(|e| DatasetError::Parse {
            line: 0,
            reason: e.to_string(),
        })?;
        let headers = reader
            .headers()
            .map_err(|e| DatasetError::Parse { line: 1, reason: e.to_string() })?
            .clone();
        let mut rows = Vec::new();
        for (i, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| DatasetError::Parse {
                line: i + 2,
                reason: e.to_string(),
            })?;
            rows.push(
                headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
        Ok(rows)
    } else {
        let reader = BufReader::new(File::open(path)?);
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, Value> =
                serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            rows.push(
                obj.iter()
                    .filter_map(|(k, v)| value_to_string(v).map(|s| (k.clone(), s)))
                    .collect(),
            );
        }
        Ok(rows)
    }
}

fn field<'a>(row: &'a Row, names: &[&str]) -> Option<&'a str> {
    names
        .iter()
        .filter_map(|n| row.get(*n))
        .map(|s| s.trim())
        .find(|s| !s.is_empty())
}

fn required<'a>(row: &'a Row, line: usize, names: &[&str]) -> Result<&'a str, DatasetError> {
    field(row, names).ok_or_else(|| DatasetError::Parse {
        line,
        reason: format!("missing column {}", names[0]),
    })
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

fn parse_date(s: &str) -> Option<NaiveDate> {
    ["%Y-%m-%d", "%B %d, %Y", "%b %d, %Y", "%d/%m/%Y"]
        .iter()
        .find_map(|fmt| NaiveDate::parse_from_str(s.trim(), fmt).ok())
}

fn row_id(row: &Row, position: usize) -> String {
    field(row, &["id", "index"])
        .map(str::to_string)
        .unwrap_or_else(|| position.to_string())
}

fn map_err<E: std::fmt::Display>(line: usize) -> impl Fn(E) -> DatasetError {
    move |e| DatasetError::Parse { line, reason: e.to_string() }
}

pub fn import_training(
    path: &Path,
    policy: InconsistencyPolicy,
) -> Result<Vec<TrainInstance>, DatasetError> {
    let rows = read_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let line = i + 1;
        out.push(TrainInstance {
            id: row_id(row, i),
            question: required(row, line, &["question", "interview_question"])?.to_string(),
            answer: required(row, line, &["interview_answer", "answer"])?.to_string(),
            clarity: parse_clarity(required(row, line, &["clarity_label", "clarity"])?)
                .map_err(map_err(line))?,
            evasion: parse_evasion(required(row, line, &["evasion_label", "evasion"])?)
                .map_err(map_err(line))?,
            president: field(row, &["president"]).map(str::to_string),
            date: field(row, &["date"]).and_then(parse_date),
            multiple_questions: field(row, &["multiple_questions"]).and_then(parse_bool),
            affirmative_question: field(row, &["affirmative_questions", "affirmative_question"])
                .and_then(parse_bool),
        });
    }
    validate_training(&out, policy)?;
    Ok(out)
}

pub fn import_test(path: &Path) -> Result<Vec<TestInstance>, DatasetError> {
    let rows = read_rows(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let line = i + 1;
        let id = row_id(row, i);
        let anns: Vec<EvasionLabel> = ["annotator1", "annotator2", "annotator3"]
            .iter()
            .filter_map(|c| field(row, &[c]))
            .map(parse_evasion)
            .collect::<Result<_, _>>()
            .map_err(map_err(line))?;
        let evasion_annotations: [EvasionLabel; 3] = anns
            .try_into()
            .map_err(|_| DatasetError::WrongAnnotatorCount(id.clone()))?;
        out.push(TestInstance {
            question: required(row, line, &["question", "interview_question"])?.to_string(),
            answer: required(row, line, &["interview_answer", "answer"])?.to_string(),
            clarity: parse_clarity(required(row, line, &["clarity_label", "clarity"])?)
                .map_err(map_err(line))?,
            evasion_annotations,
            id,
        });
    }
    super::check_unique(out.iter().map(|i| i.id.as_str()))?;
    Ok(out)
}
