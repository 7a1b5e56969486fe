//! Batched zero-shot evasion labelling with chat-completion models.

use std::collections::VecDeque;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Annotated;
use crate::predictions::{PredictionError, PredictionSet};
use crate::taxonomy::{parse_evasion, EvasionLabel, LabelFamily};

/// Verbatim system prompt shipped with the crate.
pub const SYSTEM_PROMPT: &str = include_str!("../prompts/evasion_system_prompt.txt");
/// SHA-256 of [`SYSTEM_PROMPT`]; any edit to the prompt file must update it.
pub const SYSTEM_PROMPT_SHA256: &str = "d7b3336b558b3b3b0a2b8b3a4cf6dedd854ee7383e7b5a1ae9e336f0ec40c1b8";

#[derive(Debug, Error)]
pub enum ZeroShotError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch of {size} exceeds the maximum of {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("prompt hash {actual} does not match the pinned {expected}")]
    PromptHashMismatch { expected: String, actual: String },
    #[error("malformed JSON response: {0}")]
    MalformedJson(String),
    #[error("expected {expected} labels, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("entry {index} is not a valid evasion label: {label:?}")]
    UnknownLabel { index: usize, label: String },
    #[error("response wrapped in code fences (strict mode)")]
    FencedResponse,
    #[error("backend error: {0}")]
    Backend(String),
    #[error("batch {batch} failed after {attempts} attempts: {last_error}")]
    ExhaustedRetries {
        batch: usize,
        attempts: usize,
        last_error: String,
        /// Everything that did succeed, for resumption.
        partial: Box<ZeroShotOutput>,
    },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system_text: String,
    pub batch_size: usize,
}

impl PromptTemplate {
    pub const DEFAULT_BATCH_SIZE: usize = 20;

    /// The bundled prompt, verified against its pinned hash.
    pub fn pinned() -> Result<Self, ZeroShotError> {
        Self::from_text(SYSTEM_PROMPT, Self::DEFAULT_BATCH_SIZE)
    }

    pub fn from_text(text: &str, batch_size: usize) -> Result<Self, ZeroShotError> {
        let actual = sha256_hex(text);
        if actual != SYSTEM_PROMPT_SHA256 {
            return Err(ZeroShotError::PromptHashMismatch {
                expected: SYSTEM_PROMPT_SHA256.into(),
                actual,
            });
        }
        Ok(PromptTemplate {
            system_text: text.to_string(),
            batch_size: batch_size.max(1),
        })
    }

    pub fn from_file(path: &Path, batch_size: usize) -> Result<Self, ZeroShotError> {
        Self::from_text(&std::fs::read_to_string(path)?, batch_size)
    }

    pub fn sha256(&self) -> String {
        sha256_hex(&self.system_text)
    }

    /// `(system_text, user_text)` for one batch of (question, answer) pairs.
    pub fn build_prompt(&self, batch: &[(&str, &str)]) -> Result<(String, String), ZeroShotError> {
        if batch.is_empty() {
            return Err(ZeroShotError::EmptyBatch);
        }
        if batch.len() > self.batch_size {
            return Err(ZeroShotError::BatchTooLarge {
                size: batch.len(),
                max: self.batch_size,
            });
        }
        let user = batch
            .iter()
            .enumerate()
            .map(|(i, (q, a))| format!("ITEM {}:\nQUESTION: {q}\nANSWER: {a}", i + 1))
            .collect::<Vec<_>>()
            .join("\n\n");
        Ok((self.system_text.clone(), user))
    }
}

/// Removes one surrounding ``` fence (with optional language tag).
fn strip_fences(raw: &str) -> Option<&str> {
    let t = raw.trim();
    let body = t.strip_prefix("```")?.strip_suffix("```")?;
    let body = match body.find('\n') {
        Some(nl) if !body[..nl].trim_start().starts_with('{') => &body[nl + 1..],
        _ => body,
    };
    Some(body.trim())
}

/// Strict parse of a `{"labels": [...]}` reply with exactly `n` entries.
pub fn parse_response(raw: &str, n: usize) -> Result<Vec<EvasionLabel>, ZeroShotError> {
    parse_response_with(raw, n, false).map(|(labels, _)| labels)
}

/// Like [`parse_response`]; also reports whether fences were stripped.
/// With `strict_fences`, fenced replies are an error instead.
pub fn parse_response_with(raw: &str, n: usize, strict_fences: bool) -> Result<(Vec<EvasionLabel>, bool), ZeroShotError> {
    let (body, fenced) = match strip_fences(raw) {
        Some(_) if strict_fences => return Err(ZeroShotError::FencedResponse),
        Some(b) => (b, true),
        None => (raw.trim(), false),
    };
    #[derive(Deserialize)]
    struct Reply {
        labels: Vec<Value>,
    }
    let reply: Reply = serde_json::from_str(body).map_err(|e| ZeroShotError::MalformedJson(e.to_string()))?;
    if reply.labels.len() != n {
        return Err(ZeroShotError::LengthMismatch {
            expected: n,
            got: reply.labels.len(),
        });
    }
    let labels = reply
        .labels
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let text = v.as_str().ok_or_else(|| ZeroShotError::UnknownLabel { index, label: v.to_string() })?;
            parse_evasion(text).map_err(|_| ZeroShotError::UnknownLabel {
                index,
                label: text.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((labels, fenced))
}

/// The reply a well-behaved model would give for `labels`.
pub fn serialize_labels(labels: &[EvasionLabel]) -> String {
    json!({"labels": labels.iter().map(|l| l.display_name()).collect::<Vec<_>>()}).to_string()
}

/// A chat-completion provider. Implementations must be safe to call from
/// several batch workers at once.
pub trait ChatBackend: Send + Sync {
    fn provider(&self) -> String;
    fn send(&self, system_text: &str, user_text: &str) -> Result<String, ZeroShotError>;
    /// Decoding parameters recorded in run manifests.
    fn parameters(&self) -> Value {
        Value::Null
    }
}

/// Client for any `/chat/completions` endpoint in the OpenAI wire format.
pub struct OpenAiCompatibleBackend {
    pub base_url: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatibleBackend {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ZeroShotError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ZeroShotError::Backend(e.to_string()))?;
        Ok(OpenAiCompatibleBackend {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            temperature: 0.0,
            max_tokens: None,
            api_key,
            client,
        })
    }

    /// Reads the API key from the environment variable `key_var`, if set.
    pub fn from_env(base_url: &str, model: &str, key_var: &str) -> Result<Self, ZeroShotError> {
        Self::new(base_url, model, std::env::var(key_var).ok(), Duration::from_secs(120))
    }
}

impl ChatBackend for OpenAiCompatibleBackend {
    fn provider(&self) -> String {
        format!("openai-compatible:{}", self.model)
    }

    fn parameters(&self) -> Value {
        json!({"base_url": self.base_url, "model": self.model, "temperature": self.temperature, "max_tokens": self.max_tokens})
    }

    fn send(&self, system_text: &str, user_text: &str) -> Result<String, ZeroShotError> {
        let mut body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": system_text},
                {"role": "user", "content": user_text},
            ],
        });
        if let Some(m) = self.max_tokens {
            body["max_tokens"] = json!(m);
        }
        let mut req = self.client.post(format!("{}/chat/completions", self.base_url)).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ZeroShotError::Backend(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| ZeroShotError::Backend(e.to_string()))?;
        if !status.is_success() {
            return Err(ZeroShotError::Backend(format!("HTTP {status}: {text}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| ZeroShotError::Backend(format!("invalid response body: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ZeroShotError::Backend("response has no choices[0].message.content".into()))
    }
}

/// Replays canned replies in order; errors once the script runs out.
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<Result<String, String>>>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = Result<String, String>>) -> Self {
        ScriptedBackend {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn provider(&self) -> String {
        "scripted".into()
    }

    fn send(&self, _: &str, _: &str) -> Result<String, ZeroShotError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.replies.lock().expect("script lock").pop_front() {
            Some(Ok(text)) => Ok(text),
            Some(Err(e)) => Err(ZeroShotError::Backend(e)),
            None => Err(ZeroShotError::Backend("script exhausted".into())),
        }
    }
}

/// Offline stand-in that labels each item with keyword rules on the answer.
#[derive(Debug, Default, Clone, Copy)]
pub struct KeywordBackend;

impl KeywordBackend {
    pub fn label(answer: &str) -> EvasionLabel {
        let a = answer.to_lowercase();
        let has = |words: &[&str]| words.iter().any(|w| a.contains(w));
        if has(&["don't know", "not aware", "haven't seen", "no idea"]) {
            EvasionLabel::Ignorance
        } else if has(&["no comment", "won't comment", "not going to", "can't discuss", "decline"]) {
            EvasionLabel::Declining
        } else if a.trim_end().ends_with('?') || has(&["what do you mean", "which one"]) {
            EvasionLabel::Clarification
        } else if has(&["but first", "the real issue", "let me talk about", "instead"]) {
            EvasionLabel::Deflection
        } else if a.starts_with("yes") || a.starts_with("no") {
            EvasionLabel::Explicit
        } else {
            EvasionLabel::General
        }
    }
}

impl ChatBackend for KeywordBackend {
    fn provider(&self) -> String {
        "mock-keyword".into()
    }

    fn send(&self, _: &str, user_text: &str) -> Result<String, ZeroShotError> {
        let labels: Vec<EvasionLabel> = user_text
            .split("\n\n")
            .filter_map(|item| item.split_once("\nANSWER: ").map(|(_, a)| Self::label(a)))
            .collect();
        Ok(serialize_labels(&labels))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff_ms: 1000,
            multiplier: 2.0,
            max_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    /// Pause before attempt `attempt + 1` (attempts are 1-based).
    pub fn backoff(&self, attempt: usize) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt.saturating_sub(1) as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub batch_size: usize,
    pub retry: RetryPolicy,
    /// Batches in flight at once.
    pub parallelism: usize,
    pub strict_fences: bool,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            batch_size: PromptTemplate::DEFAULT_BATCH_SIZE,
            retry: RetryPolicy::default(),
            parallelism: 1,
            strict_fences: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: usize,
    pub raw_response: Option<String>,
    pub error: Option<String>,
    pub fence_stripped: bool,
}

/// Audit record for one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub batch_index: usize,
    pub item_ids: Vec<String>,
    pub user_text: String,
    pub attempts: Vec<AttemptLog>,
    pub succeeded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotOutput {
    pub evasion: PredictionSet,
    pub clarity: PredictionSet,
    pub logs: Vec<BatchLog>,
}

fn run_batch(
    index: usize,
    items: &[(&str, &str, &str)],
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    config: &ZeroShotConfig,
) -> (BatchLog, Result<Vec<EvasionLabel>, String>) {
    let pairs: Vec<(&str, &str)> = items.iter().map(|(_, q, a)| (*q, *a)).collect();
    let mut log = BatchLog {
        batch_index: index,
        item_ids: items.iter().map(|(id, _, _)| id.to_string()).collect(),
        user_text: String::new(),
        attempts: Vec::new(),
        succeeded: false,
    };
    let (system, user) = match template.build_prompt(&pairs) {
        Ok(p) => p,
        Err(e) => return (log, Err(e.to_string())),
    };
    log.user_text = user.clone();
    let attempts = config.retry.max_attempts.max(1);
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        let (raw, outcome) = match backend.send(&system, &user) {
            Ok(raw) => {
                let parsed = parse_response_with(&raw, items.len(), config.strict_fences);
                (Some(raw), parsed)
            }
            Err(e) => (None, Err(e)),
        };
        match outcome {
            Ok((labels, fenced)) => {
                if fenced {
                    log::warn!("batch {index}: stripped code fences from response");
                }
                log.attempts.push(AttemptLog { attempt, raw_response: raw, error: None, fence_stripped: fenced });
                log.succeeded = true;
                return (log, Ok(labels));
            }
            Err(e) => {
                log::warn!("batch {index} attempt {attempt}/{attempts}: {e}");
                last_error = e.to_string();
                log.attempts.push(AttemptLog { attempt, raw_response: raw, error: Some(last_error.clone()), fence_stripped: false });
                if attempt < attempts {
                    std::thread::sleep(config.retry.backoff(attempt));
                }
            }
        }
    }
    (log, Err(last_error))
}

/// Labels every instance not already present in `resume`, in batches.
///
/// Output sets follow input order whatever order batches complete in.
pub fn classify_dataset<T: Annotated + Sync>(
    instances: &[T],
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    config: &ZeroShotConfig,
    resume: Option<&PredictionSet>,
    run_id: &str,
) -> Result<ZeroShotOutput, ZeroShotError> {
    let template = PromptTemplate {
        system_text: template.system_text.clone(),
        batch_size: config.batch_size.max(1),
    };
    let pending: Vec<(&str, &str, &str)> = instances
        .iter()
        .filter(|i| resume.is_none_or(|r| r.get(i.id()).is_none()))
        .map(|i| (i.id(), i.question(), i.answer()))
        .collect();
    let batches: Vec<&[(&str, &str, &str)]> = pending.chunks(template.batch_size).collect();
    type BatchResult = (BatchLog, Result<Vec<EvasionLabel>, String>);
    let results: Mutex<Vec<Option<BatchResult>>> =
        Mutex::new((0..batches.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..config.parallelism.clamp(1, batches.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= batches.len() {
                    break;
                }
                let r = run_batch(i, batches[i], backend, &template, config);
                results.lock().expect("collector lock")[i] = Some(r);
            });
        }
    });

    let mut labels: std::collections::HashMap<&str, EvasionLabel> = std::collections::HashMap::new();
    if let Some(r) = resume {
        for (id, l) in r.iter() {
            if let Some(e) = l.as_evasion() {
                labels.insert(id, e);
            }
        }
    }
    let mut logs = Vec::with_capacity(batches.len());
    let mut failure: Option<(usize, usize, String)> = None;
    for (i, slot) in results.into_inner().expect("collector lock").into_iter().enumerate() {
        let (log, outcome) = slot.expect("every batch ran");
        match outcome {
            Ok(ls) => {
                for ((id, _, _), l) in batches[i].iter().zip(ls) {
                    labels.insert(id, l);
                }
            }
            Err(e) => {
                if failure.is_none() {
                    failure = Some((i, log.attempts.len(), e));
                }
            }
        }
        logs.push(log);
    }

    let mut evasion = PredictionSet::new(run_id, None, LabelFamily::Evasion);
    for inst in instances {
        if let Some(l) = labels.get(inst.id()) {
            evasion.insert(inst.id(), (*l).into())?;
        }
    }
    let output = ZeroShotOutput {
        clarity: evasion.derived_clarity(),
        evasion,
        logs,
    };
    match failure {
        Some((batch, attempts, last_error)) => Err(ZeroShotError::ExhaustedRetries {
            batch,
            attempts,
            last_error,
            partial: Box::new(output),
        }),
        None => Ok(output),
    }
}
