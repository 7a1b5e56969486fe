//! Adapter to an out-of-process encoder speaking JSON lines.
//!
//! Each request is one JSON object with a `cmd` field; each reply is one
//! line `{"ok": true, ...}` or `{"ok": false, "error": "..."}`.
//! `scripts/hf_encoder_worker.py` implements the protocol on top of a
//! pretrained transformer.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{BackendSettings, Checkpoint, CheckpointState, EncoderBackend, Example, TrainingError};
use crate::preprocessing::RenderedInput;

pub struct ProcessEncoderBackend {
    name: String,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    checkpoint_dir: PathBuf,
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct Reply {
    ok: bool,
    #[serde(default)]
    error: Option<String>,
    #[serde(flatten)]
    rest: serde_json::Map<String, Value>,
}

fn failure(e: impl ToString) -> TrainingError {
    TrainingError::BackendFailure(e.to_string())
}

impl ProcessEncoderBackend {
    /// Starts `program args...`; checkpoints are written below `checkpoint_dir`.
    pub fn spawn(
        name: impl Into<String>,
        program: &str,
        args: &[String],
        checkpoint_dir: &Path,
    ) -> Result<Self, TrainingError> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| failure(format!("{program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ProcessEncoderBackend {
            name: name.into(),
            child,
            stdin,
            stdout,
            checkpoint_dir: checkpoint_dir.to_path_buf(),
            seed: None,
        })
    }

    fn call(&mut self, request: Value) -> Result<serde_json::Map<String, Value>, TrainingError> {
        writeln!(self.stdin, "{request}").map_err(failure)?;
        self.stdin.flush().map_err(failure)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(failure)? == 0 {
            return Err(failure("encoder process closed its output"));
        }
        let reply: Reply = serde_json::from_str(&line).map_err(|e| failure(format!("bad reply {line:?}: {e}")))?;
        if !reply.ok {
            return Err(failure(reply.error.unwrap_or_else(|| "unspecified worker error".into())));
        }
        Ok(reply.rest)
    }
}

impl Drop for ProcessEncoderBackend {
    fn drop(&mut self) {
        let _ = writeln!(self.stdin, "{}", json!({"cmd": "shutdown"}));
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl EncoderBackend for ProcessEncoderBackend {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn initialize(&mut self, settings: &BackendSettings) -> Result<(), TrainingError> {
        self.seed = Some(settings.seed);
        self.call(json!({"cmd": "initialize", "settings": settings}))?;
        Ok(())
    }

    fn train_epoch(&mut self, batches: &[Vec<&Example>], class_weights: &[f64]) -> Result<f64, TrainingError> {
        let batches: Vec<Vec<Value>> = batches
            .iter()
            .map(|b| b.iter().map(|e| json!({"segments": e.input.segments, "label": e.label})).collect())
            .collect();
        let reply = self.call(json!({"cmd": "train_epoch", "batches": batches, "class_weights": class_weights}))?;
        reply
            .get("loss")
            .and_then(Value::as_f64)
            .ok_or_else(|| failure("train_epoch reply lacks a numeric loss"))
    }

    fn predict(&mut self, inputs: &[&RenderedInput]) -> Result<Vec<Vec<f64>>, TrainingError> {
        let segments: Vec<&Vec<String>> = inputs.iter().map(|i| &i.segments).collect();
        let reply = self.call(json!({"cmd": "predict", "inputs": segments}))?;
        let probs = reply
            .get("probabilities")
            .cloned()
            .ok_or_else(|| failure("predict reply lacks probabilities"))?;
        serde_json::from_value(probs).map_err(failure)
    }

    fn snapshot(&mut self, epoch: usize) -> Result<Checkpoint, TrainingError> {
        let seed = self.seed.ok_or_else(|| failure("backend used before initialize"))?;
        let path = self.checkpoint_dir.join(format!("seed{seed}-best"));
        self.call(json!({"cmd": "snapshot", "path": path, "epoch": epoch}))?;
        Ok(Checkpoint {
            backend: self.id(),
            epoch,
            state: CheckpointState::OnDisk { path },
        })
    }

    fn restore(&mut self, checkpoint: &Checkpoint) -> Result<(), TrainingError> {
        match &checkpoint.state {
            CheckpointState::OnDisk { path } => {
                self.call(json!({"cmd": "restore", "path": path}))?;
                Ok(())
            }
            CheckpointState::InMemory { .. } => Err(failure("process encoders restore from disk only")),
        }
    }
}
