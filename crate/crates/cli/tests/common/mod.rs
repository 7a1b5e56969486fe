//! Synthetic interview data shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clarity_core::dataset::{write_jsonl, TestInstance, TrainInstance};
use clarity_core::rng;
use clarity_core::taxonomy::{clarity_of, EvasionLabel};

pub const PRESIDENTS: [&str; 4] = ["Trump", "Obama", "Bush", "Biden"];

/// Per-label instance counts for the 200-row training fixture, in taxonomy order.
pub const TRAIN_COUNTS: [usize; 9] = [40, 25, 30, 20, 20, 15, 20, 15, 15];

fn cue(label: EvasionLabel) -> &'static [&'static str] {
    use EvasionLabel::*;
    match label {
        Explicit => &["yes", "absolutely", "we will do exactly that", "the answer is yes"],
        Implicit => &["what matters", "one could infer", "people understand", "read between the lines"],
        Dodging => &["something else entirely", "let me talk about", "more important issue", "turning to"],
        General => &["in general", "broadly speaking", "our values", "as a principle"],
        Deflection => &["the other side", "my opponent", "they failed", "blame them"],
        Partial => &["part of it", "one aspect", "to some extent", "partially"],
        Declining => &["won't comment", "not going to answer", "no comment", "decline to say"],
        Ignorance => &["don't know", "not aware", "no idea", "haven't seen"],
        Clarification => &["could you clarify", "what do you mean", "which question", "repeat that"],
    }
}

const FILLER: [&str; 12] = [
    "the economy", "our country", "this week", "the families", "congress", "the budget",
    "the region", "our allies", "the plan", "the people", "jobs", "security",
];

fn sentence(label: EvasionLabel, pick: &mut impl FnMut(usize) -> usize) -> String {
    let cues = cue(label);
    let c1 = cues[pick(cues.len())];
    let c2 = cues[pick(cues.len())];
    let f1 = FILLER[pick(FILLER.len())];
    let f2 = FILLER[pick(FILLER.len())];
    format!("Well, {c1} regarding {f1}. And {c2}, about {f2}.")
}

pub fn train_instances() -> Vec<TrainInstance> {
    let mut r = rng::seeded(7);
    let mut pick = |n: usize| rng::below(&mut r, n as u64) as usize;
    let mut out = Vec::new();
    for (label, &n) in EvasionLabel::ALL.iter().zip(&TRAIN_COUNTS) {
        for _ in 0..n {
            let i = out.len();
            out.push(TrainInstance {
                id: format!("tr{i:04}"),
                question: format!("Question {i}: will you act on {}?", FILLER[i % FILLER.len()]),
                answer: sentence(*label, &mut pick),
                clarity: clarity_of(*label),
                evasion: *label,
                president: Some(PRESIDENTS[i % PRESIDENTS.len()].to_string()),
                date: None,
                multiple_questions: None,
                affirmative_question: None,
            });
        }
    }
    out
}

/// 54 test rows, six per label. A1 always holds the true label; A2 and A3
/// disagree on some rows.
pub fn test_instances() -> Vec<TestInstance> {
    let mut r = rng::seeded(11);
    let mut pick = |n: usize| rng::below(&mut r, n as u64) as usize;
    let mut out = Vec::new();
    for (k, label) in EvasionLabel::ALL.iter().enumerate() {
        for j in 0..6 {
            let i = out.len();
            let other = EvasionLabel::ALL[(k + 1) % 9];
            let a2 = if j == 0 { other } else { *label };
            let a3 = if j == 1 { EvasionLabel::ALL[(k + 4) % 9] } else { *label };
            out.push(TestInstance {
                id: format!("te{i:04}"),
                question: format!("Test question {i}?"),
                answer: sentence(*label, &mut pick),
                clarity: clarity_of(*label),
                evasion_annotations: [*label, a2, a3],
            });
        }
    }
    out
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub train: PathBuf,
    pub test: PathBuf,
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("data/train.jsonl");
    let test = dir.path().join("data/test.jsonl");
    std::fs::create_dir_all(train.parent().unwrap()).unwrap();
    write_jsonl(&train_instances(), &train).unwrap();
    write_jsonl(&test_instances(), &test).unwrap();
    Fixture { dir, train, test }
}

pub fn fine_tune_toml(run_id: &str, seeds: &[u64], target: &str) -> String {
    format!(
        r#"run_id = "{run_id}"
mode = "fine_tune"
output_dir = "runs"

[data]
train = "data/train.jsonl"
test = "data/test.jsonl"

[training]
target = "{target}"
seeds = {seeds:?}
train_batch_size = 16

[training.weights]
kind = "sqrt"

[encoder]
kind = "hashed_linear"
buckets = 4096
"#
    )
}

pub fn zero_shot_toml(run_id: &str) -> String {
    format!(
        r#"run_id = "{run_id}"
mode = "zero_shot"
output_dir = "runs"

[data]
train = "data/train.jsonl"
test = "data/test.jsonl"

[zeroshot]
batch_size = 20
parallelism = 2

[chat]
kind = "mock_keyword"
"#
    )
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}
