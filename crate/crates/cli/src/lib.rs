//! Configuration-driven orchestration on top of `clarity_core`: experiment
//! runs with manifests, prediction and submission files, reports and plots.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;
pub mod plots;

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use clarity_core::dataset::DatasetError;
use clarity_core::ensemble::EnsembleError;
use clarity_core::evaluation::EvalError;
use clarity_core::predictions::{PredictionError, PredictionFormat, PredictionSet};
use clarity_core::preprocessing::PreprocessError;
use clarity_core::splitting::SplitError;
use clarity_core::training::TrainingError;
use clarity_core::zeroshot::ZeroShotError;

pub use config::ExperimentConfig;
pub use experiment::run_experiment;
pub use manifest::RunManifest;
pub use plots::emit_report_plots;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("run {dir} already completed with config hash {hash}; pass --force to overwrite")]
    AlreadyRun { dir: PathBuf, hash: String },
    #[error("{dir} holds a run with a different configuration (hash {existing}); pass --force to overwrite")]
    ConfigChanged { dir: PathBuf, existing: String },
    #[error("{0} exists and is not a run directory; pass --force to overwrite")]
    ForeignDirectory(PathBuf),
    #[error("run {run_id}, {stage}: {source}")]
    Stage {
        run_id: String,
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    ZeroShot(#[from] ZeroShotError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Prediction(#[from] PredictionError),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// Tags errors from one pipeline stage with the run they belong to.
pub(crate) trait StageContext<T> {
    fn stage(self, run_id: &str, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Into<CliError>> StageContext<T> for Result<T, E> {
    fn stage(self, run_id: &str, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Stage {
            run_id: run_id.to_string(),
            stage,
            source: Box::new(e.into()),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let mut hasher = Sha256::new();
    let mut f = File::open(path).map_err(CliError::io(path))?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(CliError::io(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    std::fs::write(path, text).map_err(CliError::io(path))
}

/// Writes a prediction file. CSV is `id,label` in input order; JSONL holds
/// one `{"id", "label"}` object per line. Labels use display strings.
pub fn write_predictions(preds: &PredictionSet, format: PredictionFormat, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    preds.write(format, path)?;
    Ok(())
}

pub fn format_extension(format: PredictionFormat) -> &'static str {
    match format {
        PredictionFormat::Csv => "csv",
        PredictionFormat::Jsonl => "jsonl",
    }
}
