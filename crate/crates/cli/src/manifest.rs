//! Run manifests: everything needed to reconstruct a run and find its files.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;
use crate::{write_text, CliError};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_run: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    /// File path → SHA-256 of every input data file.
    pub data_hashes: BTreeMap<String, String>,
    pub shuffle_algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub backend: String,
    #[serde(default)]
    pub backend_parameters: Value,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
    pub seeds: Vec<SeedRecord>,
    /// Every file the run wrote, relative to the run directory, sorted.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), CliError> {
        write_text(&run_dir.join(MANIFEST_FILE), &self.to_json())
    }

    pub fn load(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(MANIFEST_FILE);
        Self::from_json(&std::fs::read_to_string(&path).map_err(CliError::io(&path))?)
    }
}
