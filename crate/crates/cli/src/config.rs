//! Experiment configuration files (JSON or TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clarity_core::dataset::InconsistencyPolicy;
use clarity_core::predictions::PredictionFormat;
use clarity_core::training::RunConfig;
use clarity_core::zeroshot::ZeroShotConfig;

use crate::{sha256_hex, CliError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    FineTune,
    ZeroShot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Canonical training JSONL; required for fine-tuning.
    #[serde(default)]
    pub train: Option<PathBuf>,
    pub test: PathBuf,
    #[serde(default)]
    pub inconsistency: InconsistencyPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderConfig {
    HashedLinear {
        #[serde(default = "default_buckets")]
        buckets: usize,
        #[serde(default = "default_stub_lr")]
        learning_rate: f64,
    },
    /// External worker, e.g. `python3 scripts/hf_encoder_worker.py --model roberta-large`.
    Process {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

fn default_buckets() -> usize {
    1 << 14
}

fn default_stub_lr() -> f64 {
    0.5
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::HashedLinear {
            buckets: default_buckets(),
            learning_rate: default_stub_lr(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ChatConfig {
    #[default]
    MockKeyword,
    OpenaiCompatible {
        base_url: String,
        model: String,
        /// Environment variable holding the API key.
        #[serde(default = "default_key_env")]
        api_key_env: String,
        #[serde(default)]
        temperature: f64,
        #[serde(default)]
        max_tokens: Option<u32>,
        #[serde(default = "default_timeout")]
        timeout_secs: u64,
    },
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NerConfig {
    #[default]
    None,
    Lexicon {
        names: Vec<String>,
    },
    /// e.g. `python3 scripts/spacy_ner.py --model en_core_web_trf`.
    Process {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_format() -> PredictionFormat {
    PredictionFormat::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Mode,
    pub data: DataConfig,
    #[serde(default)]
    pub training: RunConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub zeroshot: ZeroShotConfig,
    #[serde(default)]
    pub chat: ChatConfig,
    #[serde(default)]
    pub ner: NerConfig,
    #[serde(default = "default_format")]
    pub prediction_format: PredictionFormat,
}

impl ExperimentConfig {
    pub fn parse(text: &str, toml_syntax: bool) -> Result<Self, CliError> {
        let config: ExperimentConfig = if toml_syntax {
            toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        } else {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        };
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let toml_syntax = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        let mut config = Self::parse(&text, toml_syntax)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.output_dir);
        resolve(&mut config.data.test);
        if let Some(t) = config.data.train.as_mut() {
            resolve(t);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return bad(format!("run_id {:?} must be a plain directory name", self.run_id));
        }
        let t = &self.training;
        if self.mode == Mode::FineTune {
            if self.data.train.is_none() {
                return bad("fine-tuning needs data.train".into());
            }
            if t.seeds.is_empty() {
                return bad("training.seeds is empty".into());
            }
            if t.max_epochs == 0 || t.train_batch_size == 0 || t.eval_batch_size == 0 {
                return bad("epochs and batch sizes must be positive".into());
            }
            if !(t.split.ratio > 0.0 && t.split.ratio < 1.0) {
                return bad(format!("split ratio {} outside (0, 1)", t.split.ratio));
            }
            if !(0.0..1.0).contains(&t.dropout) || !(0.0..=1.0).contains(&t.warmup_ratio) {
                return bad("dropout must lie in [0, 1) and warmup_ratio in [0, 1]".into());
            }
            t.weights.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        if self.mode == Mode::ZeroShot && (self.zeroshot.batch_size == 0 || self.zeroshot.retry.max_attempts == 0) {
            return bad("zero-shot batch size and retry attempts must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, identical for equivalent JSON and
    /// TOML files.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}
