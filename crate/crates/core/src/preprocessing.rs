//! Encoder input rendering and person-name masking.
//!
//! Two input layouts are supported:
//!
//! * **segmented**: two segments, answer first, question second. The encoder's
//!   tokenizer inserts its own classifier/separator tokens and, where the
//!   backbone has them, token-type ids for the boundary.
//! * **marked**: a single sequence `"[QUESTION] q [ANSWER] a"`. The two markers
//!   must be registered as special tokens with the backend.
//!
//! Masking replaces PERSON spans found by an [`NerBackend`] either with a flat
//! `[PERSON]` token or with `[PERSON_i]` placeholders that keep mentions of
//! the same individual aligned across question and answer.
//!
//! Span offsets are UTF-8 byte offsets into the original text.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const QUESTION_MARKER: &str = "[QUESTION]";
pub const ANSWER_MARKER: &str = "[ANSWER]";
pub const PERSON_TOKEN: &str = "[PERSON]";

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("{0} text is empty")]
    EmptyText(&'static str),
    #[error("{0} text contains a reserved marker string")]
    MarkerCollision(&'static str),
    #[error("NER backend unavailable: {0}")]
    BackendUnavailable(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Segmented,
    #[default]
    Marked,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    #[default]
    None,
    Naive,
    EntityAware,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedInput {
    pub mode: Representation,
    pub segments: Vec<String>,
    /// Marker strings the tokenizer vocabulary must contain.
    pub added_special_tokens: Vec<String>,
}

impl RenderedInput {
    /// The segments joined in order, as seen by a single-sequence consumer.
    pub fn joined(&self) -> String {
        self.segments.join(" ")
    }
}

fn non_empty(text: &str, what: &'static str) -> Result<(), PreprocessError> {
    if text.trim().is_empty() {
        Err(PreprocessError::EmptyText(what))
    } else {
        Ok(())
    }
}

pub fn render_segmented(question: &str, answer: &str) -> Result<RenderedInput, PreprocessError> {
    non_empty(question, "question")?;
    non_empty(answer, "answer")?;
    Ok(RenderedInput {
        mode: Representation::Segmented,
        segments: vec![answer.to_string(), question.to_string()],
        added_special_tokens: Vec::new(),
    })
}

pub fn render_marked(question: &str, answer: &str) -> Result<RenderedInput, PreprocessError> {
    non_empty(question, "question")?;
    non_empty(answer, "answer")?;
    for (text, what) in [(question, "question"), (answer, "answer")] {
        if text.contains(QUESTION_MARKER) || text.contains(ANSWER_MARKER) {
            return Err(PreprocessError::MarkerCollision(what));
        }
    }
    Ok(RenderedInput {
        mode: Representation::Marked,
        segments: vec![format!("{QUESTION_MARKER} {question} {ANSWER_MARKER} {answer}")],
        added_special_tokens: vec![QUESTION_MARKER.to_string(), ANSWER_MARKER.to_string()],
    })
}

pub fn render(
    representation: Representation,
    question: &str,
    answer: &str,
) -> Result<RenderedInput, PreprocessError> {
    match representation {
        Representation::Segmented => render_segmented(question, answer),
        Representation::Marked => render_marked(question, answer),
    }
}

/// Special tokens a backend must register for a representation.
pub fn special_tokens(representation: Representation) -> Vec<String> {
    match representation {
        Representation::Segmented => Vec::new(),
        Representation::Marked => vec![QUESTION_MARKER.to_string(), ANSWER_MARKER.to_string()],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonSpan {
    pub start: usize,
    pub end: usize,
    pub surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_id: Option<usize>,
}

/// A named-entity recognizer that reports PERSON mentions.
pub trait NerBackend {
    /// Non-overlapping PERSON spans in text order.
    fn detect(&self, text: &str) -> Result<Vec<PersonSpan>, PreprocessError>;

    /// Whether `detect` may be called from several threads at once.
    fn concurrent_safe(&self) -> bool {
        false
    }
}

/// Deterministic lexicon matcher: reports known names at word boundaries,
/// preferring the longest name at each position.
#[derive(Debug, Clone, Default)]
pub struct LexiconNer {
    names: Vec<String>,
}

impl LexiconNer {
    pub fn new<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut names: Vec<String> = names
            .into_iter()
            .map(Into::into)
            .filter(|n| !n.trim().is_empty())
            .collect();
        names.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        names.dedup();
        Self { names }
    }
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

impl NerBackend for LexiconNer {
    fn detect(&self, text: &str) -> Result<Vec<PersonSpan>, PreprocessError> {
        let bytes = text.as_bytes();
        let mut spans = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let at_boundary = pos == 0 || !is_word_byte(bytes[pos - 1]);
            let hit = if at_boundary && text.is_char_boundary(pos) {
                self.names.iter().find(|name| {
                    let end = pos + name.len();
                    text[pos..].starts_with(name.as_str())
                        && (end == bytes.len() || !is_word_byte(bytes[end]))
                })
            } else {
                None
            };
            match hit {
                Some(name) => {
                    spans.push(PersonSpan {
                        start: pos,
                        end: pos + name.len(),
                        surface: name.clone(),
                        entity_id: None,
                    });
                    pos += name.len();
                }
                None => pos += 1,
            }
        }
        Ok(spans)
    }

    fn concurrent_safe(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct NerRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct NerResponse {
    #[serde(default)]
    spans: Vec<RawSpan>,
    #[serde(default)]
    error: Option<String>,
}

#[derive(Deserialize)]
struct RawSpan {
    /// Character (not byte) offsets, as produced by Python recognizers.
    start: usize,
    end: usize,
    #[serde(default = "person_label")]
    label: String,
}

fn person_label() -> String {
    "PERSON".into()
}

/// Adapter to an out-of-process recognizer speaking JSON lines:
/// `{"text": ...}` in, `{"spans": [{"start", "end", "label"}]}` out, with
/// character offsets. `scripts/spacy_ner.py` implements the protocol.
pub struct ProcessNer {
    inner: Mutex<NerProcess>,
}

struct NerProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl ProcessNer {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self, PreprocessError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| PreprocessError::BackendUnavailable(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            inner: Mutex::new(NerProcess { child, stdin, stdout }),
        })
    }
}

impl Drop for ProcessNer {
    fn drop(&mut self) {
        if let Ok(p) = self.inner.get_mut() {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
    }
}

fn char_to_byte_offsets(text: &str) -> Vec<usize> {
    let mut offsets: Vec<usize> = text.char_indices().map(|(b, _)| b).collect();
    offsets.push(text.len());
    offsets
}

impl NerBackend for ProcessNer {
    fn detect(&self, text: &str) -> Result<Vec<PersonSpan>, PreprocessError> {
        let unavailable = |e: String| PreprocessError::BackendUnavailable(e);
        let mut p = self.inner.lock().map_err(|e| unavailable(e.to_string()))?;
        let request = serde_json::to_string(&NerRequest { text }).expect("request serializes");
        writeln!(p.stdin, "{request}").map_err(|e| unavailable(e.to_string()))?;
        p.stdin.flush().map_err(|e| unavailable(e.to_string()))?;
        let mut line = String::new();
        if p.stdout.read_line(&mut line).map_err(|e| unavailable(e.to_string()))? == 0 {
            return Err(unavailable("recognizer process closed its output".into()));
        }
        let resp: NerResponse = serde_json::from_str(&line).map_err(|e| unavailable(e.to_string()))?;
        if let Some(err) = resp.error {
            return Err(unavailable(err));
        }
        let offsets = char_to_byte_offsets(text);
        let mut spans: Vec<PersonSpan> = resp
            .spans
            .into_iter()
            .filter(|s| s.label == "PERSON" && s.start < s.end && s.end < offsets.len())
            .map(|s| {
                let (start, end) = (offsets[s.start], offsets[s.end]);
                PersonSpan {
                    start,
                    end,
                    surface: text[start..end].to_string(),
                    entity_id: None,
                }
            })
            .collect();
        spans.sort_by_key(|s| s.start);
        Ok(drop_overlaps(spans))
    }
}

fn drop_overlaps(spans: Vec<PersonSpan>) -> Vec<PersonSpan> {
    let mut out: Vec<PersonSpan> = Vec::with_capacity(spans.len());
    for s in spans {
        if out.last().is_none_or(|prev| s.start >= prev.end) {
            out.push(s);
        }
    }
    out
}

/// Byte ranges of placeholders (`[PERSON]`, `[PERSON_3]`) already in the text.
fn placeholder_ranges(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find("[PERSON") {
        let start = from + rel;
        let rest = &text[start + "[PERSON".len()..];
        let len = if rest.starts_with(']') {
            Some(1)
        } else if let Some(digits) = rest.strip_prefix('_') {
            let n = digits.bytes().take_while(u8::is_ascii_digit).count();
            (n > 0 && digits.as_bytes().get(n) == Some(&b']')).then_some(n + 2)
        } else {
            None
        };
        match len {
            Some(l) => {
                let end = start + "[PERSON".len() + l;
                out.push((start, end));
                from = end;
            }
            None => from = start + 1,
        }
    }
    out
}

/// PERSON spans of `text`, excluding anything that touches an existing
/// placeholder so masking is idempotent.
pub fn detect_persons(text: &str, ner: &dyn NerBackend) -> Result<Vec<PersonSpan>, PreprocessError> {
    let reserved = placeholder_ranges(text);
    let mut spans = ner.detect(text)?;
    spans.retain(|s| {
        s.start < s.end
            && s.end <= text.len()
            && reserved.iter().all(|&(a, b)| s.end <= a || s.start >= b)
    });
    spans.sort_by_key(|s| s.start);
    Ok(drop_overlaps(spans))
}

fn replace_spans(text: &str, spans: &[PersonSpan], placeholder: impl Fn(&PersonSpan) -> String) -> String {
    let mut out = text.to_string();
    for span in spans.iter().rev() {
        out.replace_range(span.start..span.end, &placeholder(span));
    }
    out
}

pub fn mask_naive(question: &str, answer: &str, ner: &dyn NerBackend) -> Result<(String, String), PreprocessError> {
    let q = detect_persons(question, ner)?;
    let a = detect_persons(answer, ner)?;
    Ok((
        replace_spans(question, &q, |_| PERSON_TOKEN.to_string()),
        replace_spans(answer, &a, |_| PERSON_TOKEN.to_string()),
    ))
}

fn name_tokens(surface: &str) -> BTreeSet<String> {
    surface
        .split(|c: char| !c.is_alphanumeric() && c != '\'' && c != '-')
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Assigns cluster ids (1-based, dense, by first appearance) to mentions
/// listed in reading order. Two mentions co-refer when one's lowercase token
/// set contains the other's; clusters are merged transitively.
pub fn cluster_mentions(surfaces: &[&str]) -> Vec<usize> {
    let tokens: Vec<BTreeSet<String>> = surfaces.iter().map(|s| name_tokens(s)).collect();
    let mut parent: Vec<usize> = (0..surfaces.len()).collect();
    for i in 0..surfaces.len() {
        for j in 0..i {
            let same = if tokens[i].is_empty() || tokens[j].is_empty() {
                surfaces[i].eq_ignore_ascii_case(surfaces[j])
            } else {
                tokens[i].is_subset(&tokens[j]) || tokens[j].is_subset(&tokens[i])
            };
            if same {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut ids: HashMap<usize, usize> = HashMap::new();
    (0..surfaces.len())
        .map(|i| {
            let root = find(&mut parent, i);
            let next = ids.len() + 1;
            *ids.entry(root).or_insert(next)
        })
        .collect()
}

pub fn mask_entity_aware(
    question: &str,
    answer: &str,
    ner: &dyn NerBackend,
) -> Result<(String, String), PreprocessError> {
    let mut q = detect_persons(question, ner)?;
    let mut a = detect_persons(answer, ner)?;
    let surfaces: Vec<&str> = q.iter().chain(a.iter()).map(|s| s.surface.as_str()).collect();
    let ids = cluster_mentions(&surfaces);
    for (span, id) in q.iter_mut().chain(a.iter_mut()).zip(ids) {
        span.entity_id = Some(id);
    }
    let placeholder = |s: &PersonSpan| format!("[PERSON_{}]", s.entity_id.expect("assigned above"));
    Ok((replace_spans(question, &q, placeholder), replace_spans(answer, &a, placeholder)))
}

pub fn apply_masking(
    mode: MaskingMode,
    question: &str,
    answer: &str,
    ner: Option<&dyn NerBackend>,
) -> Result<(String, String), PreprocessError> {
    match (mode, ner) {
        (MaskingMode::None, _) => Ok((question.to_string(), answer.to_string())),
        (_, None) => Err(PreprocessError::BackendUnavailable("masking requested without a recognizer".into())),
        (MaskingMode::Naive, Some(ner)) => mask_naive(question, answer, ner),
        (MaskingMode::EntityAware, Some(ner)) => mask_entity_aware(question, answer, ner),
    }
}

/// Masks then renders one question–answer pair.
pub fn prepare_input(
    representation: Representation,
    masking: MaskingMode,
    question: &str,
    answer: &str,
    ner: Option<&dyn NerBackend>,
) -> Result<RenderedInput, PreprocessError> {
    let (q, a) = apply_masking(masking, question, answer, ner)?;
    render(representation, &q, &a)
}
